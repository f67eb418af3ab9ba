"""The compound training objective: ASR cross-entropy plus commitment,
semantic-alignment, and noise-classification terms with fixed weights.

L2 terms are normalized by (valid timesteps x dims) so the weights stay
scale-comparable across sequence lengths and feature widths.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class LossWeights:
    w_asr: float = 1.0
    w_alpha: float = 0.5
    w_beta: float = 0.5
    w_nc: float = 1.0

    def __post_init__(self):
        for name in ("w_asr", "w_alpha", "w_beta", "w_nc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        # the alpha/beta pair is balanced whenever both terms are active;
        # ablations zero one side out
        if self.w_alpha > 0 and self.w_beta > 0:
            if abs(self.w_alpha + self.w_beta - 1.0) > 1e-9:
                raise ValueError("active alpha/beta weights must sum to 1.0")


@dataclass
class LossBreakdown:
    l_asr: float
    l_alpha: float
    l_beta: float
    l_nc: float
    total: float
    weights: LossWeights

    def as_dict(self) -> dict:
        return {"l_asr": self.l_asr, "l_alpha": self.l_alpha,
                "l_beta": self.l_beta, "l_nc": self.l_nc,
                "w_nc": self.weights.w_nc, "total": self.total}


def _masked_sq_mean(a: dc.Tensor, b: dc.Tensor, valid_len) -> dc.Tensor:
    t, d = a.shape[-2], a.shape[-1]
    if a.shape != b.shape:
        raise dc.ContractError(f"loss operands disagree: {a.shape} vs {b.shape}")
    if np.ndim(valid_len) == 0:
        mask = (np.arange(t) < int(valid_len)).astype(float)
        denom = float(valid_len) * d
    else:
        vl = np.asarray(valid_len)
        mask = (np.arange(t) < vl[:, None]).astype(float)
        denom = float(vl.sum()) * d
    if denom <= 0:
        raise dc.ContractError("no valid timesteps in loss mask")
    diff = dc.sub(a, b)
    sq = dc.mul(diff, diff)
    return dc.scale(dc.sum_all(dc.mul(sq, dc.const(mask[..., None]))), 1.0 / denom)


def commitment_loss(clean_latent: dc.Tensor, quantized: dc.Tensor,
                    valid_len) -> dc.Tensor:
    """Pull the quantized noisy-path outputs toward detached clean latents
    (mean squared distance over valid timesteps)."""
    return _masked_sq_mean(dc.const(clean_latent.data), quantized, valid_len)


def vq_anchor_loss(latents: dc.Tensor, codes: np.ndarray,
                   valid_len) -> dc.Tensor:
    """Quantizer-internal commitment: keep encoder outputs near their own
    (detached) codes. This is part of the quantizer machinery, not one of
    the four scheduled cost terms; without it the encoder scale drifts
    because every other gradient path is scale-free."""
    return _masked_sq_mean(dc.const(codes), latents, valid_len)


def semantic_loss(clean_target: dc.Tensor, decoded: dc.Tensor,
                  valid_len) -> dc.Tensor:
    """Pull the reconstructed embedding toward the detached clean frozen-
    encoder embedding (mean squared distance over valid frames)."""
    return _masked_sq_mean(dc.const(clean_target.data), decoded, valid_len)


def total_loss(l_asr: dc.Tensor | None, l_alpha: dc.Tensor | None,
               l_beta: dc.Tensor | None, l_nc: dc.Tensor | None,
               weights: LossWeights) -> tuple[dc.Tensor, LossBreakdown]:
    """Weighted sum; zero-weight terms contribute nothing to the graph."""
    terms = [("l_asr", l_asr, weights.w_asr), ("l_alpha", l_alpha, weights.w_alpha),
             ("l_beta", l_beta, weights.w_beta), ("l_nc", l_nc, weights.w_nc)]
    total: dc.Tensor | None = None
    raw = {}
    for name, term, w in terms:
        if term is None or w == 0.0:
            raw[name] = 0.0 if term is None else term.item()
            continue
        val = term.item()
        if not np.isfinite(val):
            raise dc.NonFiniteError(f"loss term {name} is non-finite")
        raw[name] = val
        piece = dc.scale(term, w)
        total = piece if total is None else dc.add(total, piece)
    if total is None:
        total = dc.const(np.asarray(0.0))
    breakdown = LossBreakdown(raw["l_asr"], raw["l_alpha"], raw["l_beta"],
                              raw["l_nc"],
                              weights.w_asr * raw["l_asr"]
                              + weights.w_alpha * raw["l_alpha"]
                              + weights.w_beta * raw["l_beta"]
                              + weights.w_nc * raw["l_nc"],
                              weights)
    return total, breakdown
