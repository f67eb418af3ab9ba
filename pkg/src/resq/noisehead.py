"""Lightweight classifier over the quantization residue.

Predicting the mixed-in noise class from the residue is what forces the
encoder to push noise out of the code tokens and into the residue; its
loss weight is scheduled down as the classifier gets confident.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .blocks import attention_block, init_attention_block, init_tensor


@dataclass
class NoiseHeadConfig:
    n_classes: int = 6          # seen classes + one "unknown" bucket
    hidden: int = 32
    use_transformer: bool = False
    d: int = 16
    unknown_fraction: float = 0.1

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two noise classes")

    @property
    def unknown_class(self) -> int:
        return self.n_classes - 1


def init_noisehead_params(cfg: NoiseHeadConfig, seed: int) -> dc.ParamSet:
    ps = dc.ParamSet()
    if cfg.use_transformer:
        init_attention_block(ps, "nc.attn", cfg.d, 2 * cfg.hidden, seed)
    # input norm keeps the classifier scale-invariant: inflating the
    # residue cannot buy classification accuracy
    ps.add("nc.ln.gamma", np.ones(cfg.d))
    ps.add("nc.ln.beta", np.zeros(cfg.d))
    init_tensor(ps, "nc.w1", (cfg.d, cfg.hidden), seed)
    ps.add("nc.b1", np.zeros(cfg.hidden))
    init_tensor(ps, "nc.w2", (cfg.hidden, cfg.n_classes), seed)
    ps.add("nc.b2", np.zeros(cfg.n_classes))
    return ps


def classify_noise(residue: dc.Tensor, params: dc.ParamSet,
                   cfg: NoiseHeadConfig, valid_len
                   ) -> tuple[dc.Tensor, dc.Tensor]:
    """Mean-pool the residue over valid timesteps and classify.

    Returns (logits, penultimate features); the latter feed projection
    plots and nearest-neighbor separability checks.
    """
    t = residue.shape[-2]
    if np.ndim(valid_len) == 0:
        valid = np.array([int(valid_len)])
        mask = (np.arange(t) < valid[:, None]).astype(float)[0]
    else:
        valid = np.asarray(valid_len, dtype=int)
        mask = (np.arange(t) < valid[:, None]).astype(float)
    if (valid <= 0).any():
        raise dc.ContractError("cannot pool a residue with no valid timesteps")
    h = residue
    if cfg.use_transformer:
        h = attention_block(h, params, "nc.attn")
    weights = mask / mask.sum(axis=-1, keepdims=True)
    pooled = dc.sum_axis(dc.mul(h, dc.const(weights[..., None])), axis=-2)
    pooled = dc.layer_norm(pooled, params["nc.ln.gamma"], params["nc.ln.beta"])
    feats = dc.gelu(dc.linear(pooled, params["nc.w1"], params["nc.b1"]))
    logits = dc.linear(feats, params["nc.w2"], params["nc.b2"])
    return logits, feats


def noise_ce(logits: dc.Tensor, labels) -> dc.Tensor:
    """Mean cross-entropy of class logits; accepts (C,) or (B, C) logits."""
    if logits.data.ndim == 1:
        logits = dc.reshape(logits, (1, logits.shape[0]))
        labels = [int(labels)] if np.ndim(labels) == 0 else labels
    return dc.softmax_xent(logits, np.asarray(labels, dtype=np.int64))


def schedule_w_nc(val_accuracy: float, w_max: float) -> float:
    """Weight inversely tied to validation accuracy: w_max * (1 - acc)."""
    if not 0.0 <= val_accuracy <= 1.0:
        raise dc.ContractError(f"accuracy {val_accuracy} outside [0, 1]")
    return float(np.clip(w_max * (1.0 - val_accuracy), 0.0, w_max))


def relabel_unknown(example_seed: int, label: int, cfg: NoiseHeadConfig) -> int:
    """Deterministically divert a fraction of training labels to 'unknown'
    so the classifier keeps an out-of-set bucket."""
    from .util import rng_for
    if rng_for(example_seed, "unknown-relabel").uniform() < cfg.unknown_fraction:
        return cfg.unknown_class
    return label
