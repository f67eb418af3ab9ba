"""Shared trainable building blocks: seeded initializers, positional
encodings, and a single-head pre-norm attention block."""
from __future__ import annotations

import functools

import numpy as np

from . import diffcore as dc
from .util import rng_for


def init_tensor(ps: dc.ParamSet, name: str, shape: tuple[int, ...], seed: int,
                scale: float | None = None, zero: bool = False,
                frozen: bool = False) -> None:
    """Add one parameter; weights are seeded per-name so creation order
    never matters."""
    if zero:
        data = np.zeros(shape)
    else:
        if scale is None:
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            scale = 1.0 / np.sqrt(fan_in)
        data = rng_for(seed, "init", name).normal(scale=scale, size=shape)
    ps.add(name, data, frozen=frozen)


def init_layer_norm(ps: dc.ParamSet, prefix: str, dim: int) -> None:
    ps.add(f"{prefix}.gamma", np.ones(dim))
    ps.add(f"{prefix}.beta", np.zeros(dim))


def init_attention_block(ps: dc.ParamSet, prefix: str, dim: int, ffn: int,
                         seed: int) -> None:
    """Pre-norm self-attention + feed-forward block. Output projections
    start at zero, so a fresh block is exactly the identity map."""
    init_layer_norm(ps, f"{prefix}.ln1", dim)
    for nm in ("wq", "wk", "wv"):
        init_tensor(ps, f"{prefix}.{nm}", (dim, dim), seed)
    init_tensor(ps, f"{prefix}.wo", (dim, dim), seed, zero=True)
    ps.add(f"{prefix}.bo", np.zeros(dim))
    init_layer_norm(ps, f"{prefix}.ln2", dim)
    init_tensor(ps, f"{prefix}.w1", (dim, ffn), seed)
    ps.add(f"{prefix}.b1", np.zeros(ffn))
    init_tensor(ps, f"{prefix}.w2", (ffn, dim), seed, zero=True)
    ps.add(f"{prefix}.b2", np.zeros(dim))


def attention_block(x: dc.Tensor, ps: dc.ParamSet, prefix: str,
                    mask: np.ndarray | None = None) -> dc.Tensor:
    h = dc.layer_norm(x, ps[f"{prefix}.ln1.gamma"], ps[f"{prefix}.ln1.beta"])
    q = dc.matmul(h, ps[f"{prefix}.wq"])
    k = dc.matmul(h, ps[f"{prefix}.wk"])
    v = dc.matmul(h, ps[f"{prefix}.wv"])
    att = dc.scaled_dot_attention(q, k, v, mask)
    x = dc.add(x, dc.linear(att, ps[f"{prefix}.wo"], ps[f"{prefix}.bo"]))
    h = dc.layer_norm(x, ps[f"{prefix}.ln2.gamma"], ps[f"{prefix}.ln2.beta"])
    h = dc.gelu(dc.linear(h, ps[f"{prefix}.w1"], ps[f"{prefix}.b1"]))
    return dc.add(x, dc.linear(h, ps[f"{prefix}.w2"], ps[f"{prefix}.b2"]))


def key_padding_mask(length: int, valid_len) -> np.ndarray | None:
    """Additive attention mask silencing keys at or past valid_len.

    Padded positions carry no information, so masking them makes every
    output at a valid position independent of how much padding follows;
    batches may then be cropped to their longest valid sequence without
    changing any value.
    """
    if valid_len is None:
        return None
    if np.ndim(valid_len) == 0:
        if int(valid_len) >= length:
            return None
        out = np.zeros((1, length))
        out[0, int(valid_len):] = -1e9
        return out
    vl = np.asarray(valid_len, dtype=int)
    if (vl >= length).all():
        return None
    out = np.where(np.arange(length)[None, :] < vl[:, None], 0.0, -1e9)
    return out[:, None, :]  # (B, 1, Tk) broadcasts over query positions


@functools.lru_cache(maxsize=32)
def sinusoid_table(length: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos positional encodings: row 0 is [0,1,0,1,...]."""
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (i - i % 2) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    table.setflags(write=False)
    return table


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), -1e9), k=1)
