"""Differentiable primitives over diffcore tensors.

Each op builds forward values eagerly and registers a closed-form
backward on the tape. All ops accept an optional leading batch axis in
addition to the documented 2-D contract shapes.
"""
from __future__ import annotations

import numpy as np

from .tensor import ContractError, ShapeError, Tensor, const, grad_enabled


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(out_data, parents, backward) -> Tensor:
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(out_data)
    return Tensor(out_data, requires_grad=True, _parents=tuple(parents),
                  _backward=backward)


# --- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    out = a.data * c

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _make(out, (a,), backward)


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - y * y))

    return _make(y, (a,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Smooth tanh-form GELU (differentiable everywhere)."""
    a = _wrap(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
            dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            a.accumulate_grad(g * dy)

    return _make(y, (a,), backward)


# --- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul needs >= 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return _make(out, (a, b), backward)


def transpose_last2(a) -> Tensor:
    a = _wrap(a)
    out = a.data.swapaxes(-1, -2)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.swapaxes(-1, -2))

    return _make(out, (a,), backward)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _make(out, (a,), backward)


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b broadcast over leading axes)."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# --- reductions -------------------------------------------------------------

def sum_all(a) -> Tensor:
    a = _wrap(a)
    out = np.asarray(a.data.sum())

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    return _make(out, (a,), backward)


def sum_axis(a, axis: int) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(out, (a,), backward)


def mean_all(a) -> Tensor:
    a = _wrap(a)
    return scale(sum_all(a), 1.0 / a.data.size)


# --- normalization / attention ---------------------------------------------

def softmax_lastdim(a, additive_mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis; mask is added to the logits first."""
    a = _wrap(a)
    z = a.data if additive_mask is None else a.data + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            a.accumulate_grad((g - dot) * y)

    return _make(y, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine pair."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta.accumulate_grad(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gh = g * gamma.data
            s1 = gh.sum(axis=-1, keepdims=True)
            s2 = (gh * xhat).sum(axis=-1, keepdims=True)
            x.accumulate_grad((gh - s1 / n - xhat * s2 / n) * inv)

    return _make(out, (x, gamma, beta), backward)


def scaled_dot_attention(q, k, v, additive_mask: np.ndarray | None = None) -> Tensor:
    """softmax(q kᵀ / sqrt(dk)) v, single head."""
    dk = q.shape[-1]
    scores = scale(matmul(q, transpose_last2(k)), 1.0 / np.sqrt(dk))
    attn = softmax_lastdim(scores, additive_mask)
    return matmul(attn, v)


# --- convolution ------------------------------------------------------------

def _conv_windows(x: np.ndarray, kk: int, stride: int) -> np.ndarray:
    # (..., T, C) -> (..., To, C, K) window view at strided start positions
    win = np.lib.stride_tricks.sliding_window_view(x, kk, axis=-2)
    return win[..., ::stride, :, :]


def conv1d(x, kernel, stride: int = 1) -> Tensor:
    """Valid cross-correlation along time. x: (..., T, Cin), kernel: (K, Cin, Cout)."""
    x, kernel = _wrap(x), _wrap(kernel)
    kk, cin, cout = kernel.shape
    t = x.shape[-2]
    if kk > t:
        raise ShapeError(f"input too short for kernel: T={t} < K={kk}")
    if stride < 1:
        raise ContractError("stride must be >= 1")
    if x.shape[-1] != cin:
        raise ShapeError(f"channel mismatch: {x.shape[-1]} != {cin}")
    win = _conv_windows(x.data, kk, stride)
    out = np.einsum("...tck,kco->...to", win, kernel.data, optimize=True)
    to = out.shape[-2]
    starts = np.arange(to) * stride

    def backward(g):
        if kernel.requires_grad:
            w = _conv_windows(x.data, kk, stride)
            gk = np.einsum("...tck,...to->kco", w, g, optimize=True)
            kernel.accumulate_grad(gk)
        if x.requires_grad:
            contrib = np.einsum("...to,kco->...tkc", g, kernel.data, optimize=True)
            gx = np.zeros_like(x.data)
            for j in range(kk):  # start positions are unique per offset j
                gx[..., starts + j, :] += contrib[..., :, j, :]
            x.accumulate_grad(gx)

    return _make(out, (x, kernel), backward)


def conv1d_transpose(x, kernel, stride: int = 1) -> Tensor:
    """Transposed (fractionally strided) conv; output T = (Tin-1)*stride + K."""
    x, kernel = _wrap(x), _wrap(kernel)
    kk, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"channel mismatch: {x.shape[-1]} != {cin}")
    tin = x.shape[-2]
    tout = (tin - 1) * stride + kk
    starts = np.arange(tin) * stride
    contrib = np.einsum("...tc,kco->...tko", x.data, kernel.data, optimize=True)
    out = np.zeros(x.shape[:-2] + (tout, cout), dtype=np.float64)
    for j in range(kk):
        out[..., starts + j, :] += contrib[..., :, j, :]

    def backward(g):
        idx = starts[:, None] + np.arange(kk)[None, :]
        gwin = g[..., idx, :]  # (..., Tin, K, Cout)
        if kernel.requires_grad:
            gk = np.einsum("...tc,...tko->kco", x.data, gwin, optimize=True)
            kernel.accumulate_grad(gk)
        if x.requires_grad:
            gx = np.einsum("...tko,kco->...tc", gwin, kernel.data, optimize=True)
            x.accumulate_grad(gx)

    return _make(out, (x, kernel), backward)


# --- time-axis resampling ---------------------------------------------------

def pool_pairs(x) -> Tensor:
    """Average non-overlapping pairs along time: (..., T, D) -> (..., T/2, D)."""
    x = _wrap(x)
    t = x.shape[-2]
    if t % 2:
        raise ContractError(f"pool_pairs needs even T, got {t}")
    shp = x.shape[:-2] + (t // 2, 2, x.shape[-1])
    out = x.data.reshape(shp).mean(axis=-2)

    def backward(g):
        if x.requires_grad:
            gx = np.repeat(g * 0.5, 2, axis=-2)
            x.accumulate_grad(gx.reshape(x.shape))

    return _make(out, (x,), backward)


def repeat_rows(x, factor: int) -> Tensor:
    """Duplicate each timestep `factor` times: (..., T, D) -> (..., T*factor, D)."""
    x = _wrap(x)
    out = np.repeat(x.data, factor, axis=-2)

    def backward(g):
        if x.requires_grad:
            shp = x.shape[:-2] + (x.shape[-2], factor, x.shape[-1])
            x.accumulate_grad(g.reshape(shp).sum(axis=-2))

    return _make(out, (x,), backward)


# --- embeddings / losses ----------------------------------------------------

def embedding_lookup(table, ids: np.ndarray) -> Tensor:
    """Gather rows of table (V, D) by integer ids (...,)."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError("embedding id out of range")
    out = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            table.accumulate_grad(gt)

    return _make(out, (table,), backward)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax_xent(logits, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]. logits: (T, V)."""
    logits = _wrap(logits)
    tgt = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError("softmax_xent expects 2-D logits")
    t, v = logits.shape
    if tgt.shape != (t,):
        raise ShapeError(f"targets must have length {t}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise ContractError("target index out of range")
    lsm = _log_softmax(logits.data)
    out = np.asarray(-lsm[np.arange(t), tgt].mean())

    def backward(g):
        if logits.requires_grad:
            p = np.exp(lsm)
            p[np.arange(t), tgt] -= 1.0
            logits.accumulate_grad(float(g) * p / t)

    return _make(out, (logits,), backward)


def softmax_xent_masked(logits, targets, mask: np.ndarray) -> Tensor:
    """Token-pooled cross-entropy: sum(-log p[target] * mask) / sum(mask).

    logits: (B, T, V); targets: (B, T) ints; mask: (B, T) in {0, 1}.
    """
    logits = _wrap(logits)
    tgt = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    total = mask.sum()
    if total <= 0:
        raise ContractError("mask selects no tokens")
    safe_tgt = np.where(mask > 0, tgt, 0)
    if safe_tgt.min() < 0 or safe_tgt.max() >= logits.shape[-1]:
        raise ContractError("target index out of range")
    lsm = _log_softmax(logits.data)
    picked = np.take_along_axis(lsm, safe_tgt[..., None], axis=-1)[..., 0]
    out = np.asarray(-(picked * mask).sum() / total)

    def backward(g):
        if logits.requires_grad:
            p = np.exp(lsm)
            np.put_along_axis(
                p, safe_tgt[..., None],
                np.take_along_axis(p, safe_tgt[..., None], axis=-1) - 1.0, axis=-1)
            logits.accumulate_grad(float(g) * p * mask[..., None] / total)

    return _make(out, (logits,), backward)
