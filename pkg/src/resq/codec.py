"""The trainable codec: latent encoder, single-stage EMA vector quantizer
with straight-through gradients, residue extraction, and latent decoder.

The quantizer is the package's core mechanism: codes capture semantic
content, while the unquantized residue (input minus chosen code) is kept
as an explicit noise representation for downstream classification.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .blocks import (attention_block, init_attention_block, init_tensor,
                     key_padding_mask, sinusoid_table)
from .util import rng_for

DOWNSAMPLE_MODES = ("mean", "conv1d", "conv_transformer")
UPSAMPLE_MODES = ("repeat", "conv_transpose")

EMA_EPS = 1e-5
DEAD_CODE_COUNT_THRESHOLD = 1e-3


@dataclass
class CodecConfig:
    downsample_mode: str = "mean"
    upsample_mode: str = "repeat"
    n_cb: int = 64
    d: int = 16
    emb_dim: int = 64
    ds_factor: int = 2
    restore_positions: bool = True
    ffn_dim: int = 128
    decay: float = 0.9
    padding_index: int = 0

    def __post_init__(self):
        if self.downsample_mode not in DOWNSAMPLE_MODES:
            raise ValueError(f"unknown downsample mode {self.downsample_mode!r}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ValueError(f"unknown upsample mode {self.upsample_mode!r}")
        if self.ds_factor != 2:
            raise ValueError("temporal downsampling factor is fixed at 2")
        if self.downsample_mode == "conv_transformer":
            # the conv-transformer retains sequence information on its own
            self.restore_positions = False


@dataclass
class Codebook:
    codes: np.ndarray
    ema_counts: np.ndarray
    ema_sums: np.ndarray
    decay: float = 0.9
    padding_index: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if not 0 <= self.padding_index < self.codes.shape[0]:
            raise ValueError("padding index outside codebook")
        if not np.isfinite(self.codes).all():
            raise ValueError("codebook holds non-finite codes")

    @property
    def n_codes(self) -> int:
        return self.codes.shape[0]

    @classmethod
    def init(cls, cfg: CodecConfig, seed: int) -> "Codebook":
        rng = rng_for(seed, "codebook")
        codes = rng.normal(scale=np.sqrt(2.0 / cfg.d), size=(cfg.n_cb, cfg.d))
        codes[cfg.padding_index] = 0.0  # fixed padding token, never updated
        counts = np.ones(cfg.n_cb)
        return cls(codes, counts, codes * counts[:, None], cfg.decay,
                   cfg.padding_index)

    def state_arrays(self, prefix: str = "cb.") -> dict[str, np.ndarray]:
        return {prefix + "codes": self.codes.copy(),
                prefix + "counts": self.ema_counts.copy(),
                prefix + "sums": self.ema_sums.copy()}

    def load_arrays(self, arrays: dict, prefix: str = "cb.") -> None:
        self.codes = arrays[prefix + "codes"].copy()
        self.ema_counts = arrays[prefix + "counts"].copy()
        self.ema_sums = arrays[prefix + "sums"].copy()


@dataclass
class QuantOut:
    indices: np.ndarray        # int codes per timestep; padding index past valid
    quantized: dc.Tensor       # codebook rows, straight-through gradient
    residue: dc.Tensor         # input minus chosen code
    valid_len: np.ndarray | int


@dataclass
class QuantFreeze:
    """Pinned quantizer decisions so the surrounding graph stays smooth
    under finite-difference probing (assignments and the straight-through
    offset are held at the base point)."""

    indices: np.ndarray
    base_latents: np.ndarray


# --- parameters ---------------------------------------------------------------

def init_codec_params(cfg: CodecConfig, seed: int) -> dc.ParamSet:
    ps = dc.ParamSet()
    d_in, d_lat = cfg.emb_dim, cfg.d
    if cfg.downsample_mode in ("conv1d", "conv_transformer"):
        init_tensor(ps, "enc.conv.kernel", (cfg.ds_factor, d_in, d_in), seed,
                    scale=1.0 / np.sqrt(cfg.ds_factor * d_in))
        ps.add("enc.conv.bias", np.zeros(d_in))
    if cfg.downsample_mode in ("mean", "conv1d"):
        init_tensor(ps, "enc.mlp.w1", (d_in, d_in), seed)
        ps.add("enc.mlp.b1", np.zeros(d_in))
        init_tensor(ps, "enc.mlp.w2", (d_in, d_in), seed)
        ps.add("enc.mlp.b2", np.zeros(d_in))
    else:
        init_attention_block(ps, "enc.attn", d_in, cfg.ffn_dim, seed)
    init_tensor(ps, "enc.proj_down", (d_in, d_lat), seed)

    init_tensor(ps, "dec.proj_up", (d_lat, d_in), seed)
    if cfg.upsample_mode == "conv_transpose":
        init_tensor(ps, "dec.convt.kernel", (cfg.ds_factor, d_in, d_in), seed,
                    scale=1.0 / np.sqrt(cfg.ds_factor * d_in))
        ps.add("dec.convt.bias", np.zeros(d_in))
    init_attention_block(ps, "dec.refine", d_in, cfg.ffn_dim, seed)
    return ps


# --- forward pieces -----------------------------------------------------------

def latent_encode(emb: dc.Tensor, params: dc.ParamSet, cfg: CodecConfig,
                  valid_len=None) -> dc.Tensor:
    """Downsample time by 2, then project the embedding dim down to d.

    valid_len (token resolution) only matters for the conv-transformer
    mode, where padded keys are masked out of the attention.
    """
    t = emb.shape[-2]
    if t % cfg.ds_factor:
        raise dc.ContractError(f"sequence length {t} not divisible by "
                               f"{cfg.ds_factor}; pad upstream")
    if cfg.downsample_mode == "mean":
        h = dc.pool_pairs(emb)
        h = dc.gelu(dc.linear(h, params["enc.mlp.w1"], params["enc.mlp.b1"]))
        h = dc.linear(h, params["enc.mlp.w2"], params["enc.mlp.b2"])
    else:
        h = dc.conv1d(emb, params["enc.conv.kernel"], stride=cfg.ds_factor)
        h = dc.add(h, params["enc.conv.bias"])
        if cfg.downsample_mode == "conv1d":
            h = dc.gelu(dc.linear(h, params["enc.mlp.w1"], params["enc.mlp.b1"]))
            h = dc.linear(h, params["enc.mlp.w2"], params["enc.mlp.b2"])
        else:
            h = attention_block(h, params, "enc.attn",
                                mask=key_padding_mask(h.shape[-2], valid_len))
    return dc.matmul(h, params["enc.proj_down"])


def _valid_mask(t: int, valid_len, batch_shape: tuple[int, ...]) -> np.ndarray:
    steps = np.arange(t)
    if np.ndim(valid_len) == 0:
        return (steps < int(valid_len)).astype(float).reshape((1,) * len(batch_shape) + (t,))
    vl = np.asarray(valid_len).reshape(batch_shape + (1,))
    return (steps < vl).astype(float)


def quantize(latents: dc.Tensor, cb: Codebook, valid_len,
             freeze: QuantFreeze | None = None) -> QuantOut:
    """Nearest-neighbor lookup against the codebook (padding code excluded,
    ties to the lowest index); timesteps past valid_len take the padding
    code. Gradients pass straight through to the latents; the codebook
    itself never receives gradients."""
    lat = latents.data
    if not np.isfinite(lat).all():
        raise dc.NonFiniteError("non-finite latents reached the quantizer")
    t = lat.shape[-2]
    batch_shape = lat.shape[:-2]
    if freeze is not None:
        idx = freeze.indices
    else:
        flat = lat.reshape(-1, lat.shape[-1])
        d2 = ((flat ** 2).sum(1)[:, None] + (cb.codes ** 2).sum(1)[None, :]
              - 2.0 * flat @ cb.codes.T)
        d2[:, cb.padding_index] = np.inf
        idx = d2.argmin(axis=1).reshape(lat.shape[:-1])
        mask = _valid_mask(t, valid_len, batch_shape) > 0
        idx = np.where(np.broadcast_to(mask, idx.shape), idx, cb.padding_index)
    codes = cb.codes[idx]
    base = lat if freeze is None else freeze.base_latents
    quantized = dc.add(latents, dc.const(codes - base))
    residue = dc.sub(latents, dc.const(codes))
    return QuantOut(idx, quantized, residue, valid_len)


def ema_update(cb: Codebook, latents: np.ndarray, quant: QuantOut) -> Codebook:
    """Exponential-moving-average codebook maintenance (mutates cb).

    counts_k <- decay*counts_k + (1-decay)*n_k and likewise for the vector
    sums; codes_k = sums_k / (counts_k + eps). The padding code is frozen.
    """
    t = latents.shape[-2]
    mask = (_valid_mask(t, quant.valid_len, latents.shape[:-2]) > 0)
    mask = np.broadcast_to(mask, latents.shape[:-1])
    flat_idx = quant.indices[mask]
    flat_lat = latents[mask]
    n_k = np.bincount(flat_idx, minlength=cb.n_codes).astype(float)
    sum_k = np.zeros_like(cb.ema_sums)
    np.add.at(sum_k, flat_idx, flat_lat)
    keep = np.ones(cb.n_codes, bool)
    keep[cb.padding_index] = False
    cb.ema_counts[keep] = cb.decay * cb.ema_counts[keep] + (1 - cb.decay) * n_k[keep]
    cb.ema_sums[keep] = cb.decay * cb.ema_sums[keep] + (1 - cb.decay) * sum_k[keep]
    cb.codes[keep] = cb.ema_sums[keep] / (cb.ema_counts[keep, None] + EMA_EPS)
    return cb


def reseed_dead_codes(cb: Codebook, dead: np.ndarray,
                      recent_latents: np.ndarray, seed: int) -> int:
    """Re-seed persistently unused codes to random recent latents."""
    dead = np.asarray(dead, bool).copy()
    dead[cb.padding_index] = False
    n_dead = int(dead.sum())
    if n_dead == 0 or recent_latents.size == 0:
        return 0
    rng = rng_for(seed, "dead-code-reseed")
    pick = rng.integers(0, recent_latents.shape[0], size=n_dead)
    cb.codes[dead] = recent_latents[pick]
    cb.ema_counts[dead] = 1.0
    cb.ema_sums[dead] = cb.codes[dead]
    return n_dead


def restore_positions(quant: QuantOut, cfg: CodecConfig) -> dc.Tensor:
    """Add fixed sinusoidal position codes to the quantized vectors; no-op
    when the conv-transformer encoder already preserves order."""
    if not cfg.restore_positions:
        return quant.quantized
    t = quant.quantized.shape[-2]
    return dc.add(quant.quantized, dc.const(sinusoid_table(t, cfg.d)))


def latent_decode(tokens: dc.Tensor, params: dc.ParamSet, cfg: CodecConfig,
                  valid_len=None) -> dc.Tensor:
    """Project back to the embedding dim, upsample time by 2, and refine.

    valid_len is at token resolution; the refinement attention masks out
    frames that upsampled from padding tokens.
    """
    h = dc.matmul(tokens, params["dec.proj_up"])
    if cfg.upsample_mode == "repeat":
        h = dc.repeat_rows(h, cfg.ds_factor)
    else:
        h = dc.conv1d_transpose(h, params["dec.convt.kernel"], stride=cfg.ds_factor)
        h = dc.add(h, params["dec.convt.bias"])
    frame_valid = None if valid_len is None else cfg.ds_factor * np.asarray(valid_len)
    return attention_block(h, params, "dec.refine",
                           mask=key_padding_mask(h.shape[-2], frame_valid))
