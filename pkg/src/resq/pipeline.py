"""Model assembly and shared forward paths.

Bundles the trainable codec + noise head with the frozen decoder and the
fixed synthetic encoder, plus an embedding cache so corpora are encoded
once per process.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .codec import (Codebook, CodecConfig, QuantFreeze, QuantOut,
                    init_codec_params, latent_decode, latent_encode, quantize,
                    restore_positions)
from .datagen import CorpusManifest, Lexicon, materialize
from .decoderhead import DecoderConfig, asr_ce, beam_decode
from .embedding_io import SEQ_LEN, encode_synthetic, pad_or_trim
from .losses import (LossBreakdown, LossWeights, commitment_loss,
                     semantic_loss, total_loss, vq_anchor_loss)
from .noisehead import NoiseHeadConfig, classify_noise, init_noisehead_params, noise_ce
from .util import worker_count


@dataclass
class LabelSpace:
    """Maps global noise-class ids to classifier-local labels."""

    seen_classes: list[int]

    @property
    def n_classes(self) -> int:
        return len(self.seen_classes) + 1  # + unknown bucket

    @property
    def unknown(self) -> int:
        return len(self.seen_classes)

    def to_local(self, global_id: int) -> int:
        return self.seen_classes.index(global_id)


@dataclass
class ModelBundle:
    codec_cfg: CodecConfig
    nc_cfg: NoiseHeadConfig
    dec_cfg: DecoderConfig
    params: dc.ParamSet        # codec + noise head, trainable
    codebook: Codebook
    decoder: dc.ParamSet       # frozen transcript decoder
    encoder_seed: int
    seq_len: int = SEQ_LEN


def build_model(codec_cfg: CodecConfig, nc_cfg: NoiseHeadConfig,
                dec_cfg: DecoderConfig, decoder: dc.ParamSet,
                encoder_seed: int, seed: int,
                seq_len: int = SEQ_LEN) -> ModelBundle:
    params = init_codec_params(codec_cfg, seed)
    head = init_noisehead_params(nc_cfg, seed)
    for name in head.names():
        params.add(name, head[name].data)
    codebook = Codebook.init(codec_cfg, seed)
    return ModelBundle(codec_cfg, nc_cfg, dec_cfg, params, codebook, decoder,
                       encoder_seed, seq_len)


# --- corpus embedding cache ---------------------------------------------------

@dataclass
class CorpusData:
    """Materializes manifest records into fixed-length embedding pairs.

    Embeddings are cached float32 (they are forward inputs only) and
    promoted to float64 at graph entry.
    """

    manifest: CorpusManifest
    lexicon: Lexicon
    encoder_seed: int
    seq_len: int = SEQ_LEN
    _cache: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.manifest.records)

    def record(self, i: int) -> dict:
        return self.manifest.records[i]

    def _compute(self, i: int):
        rec = self.manifest.records[i]
        pair = materialize(rec, self.lexicon)
        e_clean = pad_or_trim(encode_synthetic(pair.clean, self.encoder_seed),
                              self.seq_len)
        e_noisy = pad_or_trim(encode_synthetic(pair.noisy, self.encoder_seed),
                              self.seq_len)
        return (e_clean.frames.astype(np.float32),
                e_noisy.frames.astype(np.float32),
                min(e_clean.valid_len, e_noisy.valid_len))

    def entry(self, i: int):
        if i not in self._cache:
            self._cache[i] = self._compute(i)
        return self._cache[i]

    def prefetch(self) -> None:
        """Encode every record, bounded by RESQ_THREADS workers."""
        todo = [i for i in range(len(self)) if i not in self._cache]
        workers = worker_count()
        if workers > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for i, out in zip(todo, pool.map(self._compute, todo)):
                    self._cache[i] = out
        else:
            for i in todo:
                self._cache[i] = self._compute(i)

    def batch(self, indices, crop: bool = True
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray,
                         list, list]:
        """(clean, noisy, valid_frames, valid_tokens, transcripts, records).

        With crop=True the frame axis is trimmed to the batch's longest
        valid prefix (rounded up to the downsample factor); attention
        masking makes this value-transparent.
        """
        entries = [self.entry(i) for i in indices]
        clean = np.stack([e[0] for e in entries]).astype(np.float64)
        noisy = np.stack([e[1] for e in entries]).astype(np.float64)
        valid = np.array([e[2] for e in entries], dtype=np.int64)
        valid_ds = (valid + 1) // 2
        if crop:
            t_b = int(2 * valid_ds.max())
            clean = clean[:, :t_b]
            noisy = noisy[:, :t_b]
        recs = [self.manifest.records[i] for i in indices]
        transcripts = [r["transcript"] for r in recs]
        return clean, noisy, valid, valid_ds, transcripts, recs


# --- forward paths --------------------------------------------------------------

def noisy_path(bundle: ModelBundle, emb_noisy: dc.Tensor, valid_ds,
               freeze: QuantFreeze | None = None):
    """Encoder -> quantizer -> position restore -> latent decoder."""
    latents = latent_encode(emb_noisy, bundle.params, bundle.codec_cfg, valid_ds)
    quant = quantize(latents, bundle.codebook, valid_ds, freeze)
    tokens = restore_positions(quant, bundle.codec_cfg)
    decoded = latent_decode(tokens, bundle.params, bundle.codec_cfg, valid_ds)
    return latents, quant, decoded


@dataclass
class StepOutput:
    total: dc.Tensor
    breakdown: LossBreakdown
    latents: np.ndarray
    quant: QuantOut


def train_loss(bundle: ModelBundle, clean: np.ndarray, noisy: np.ndarray,
               valid: np.ndarray, valid_ds: np.ndarray, transcripts,
               nc_labels, weights: LossWeights,
               freeze: QuantFreeze | None = None,
               vq_anchor: float = 0.25) -> StepOutput:
    """Compound loss over one batch; only the noisy signal runs through the
    model, the clean twin supplies detached targets.

    vq_anchor scales the quantizer's internal commitment (latents pulled
    toward their own codes); it rides on top of the four scheduled terms.
    """
    emb_noisy = dc.const(noisy)
    latents, quant, decoded = noisy_path(bundle, emb_noisy, valid_ds, freeze)

    l_asr = l_alpha = l_beta = l_nc = None
    if weights.w_asr > 0:
        l_asr = asr_ce(decoded, transcripts, bundle.decoder, bundle.dec_cfg,
                       mem_valid=valid)
    if weights.w_alpha > 0 or weights.w_beta > 0:
        with dc.no_grad():
            clean_t = dc.const(clean)
            if weights.w_alpha > 0:
                lat_clean = latent_encode(clean_t, bundle.params,
                                          bundle.codec_cfg, valid_ds)
        if weights.w_alpha > 0:
            l_alpha = commitment_loss(lat_clean, quant.quantized, valid_ds)
        if weights.w_beta > 0:
            l_beta = semantic_loss(dc.const(clean), decoded, valid)
    if weights.w_nc > 0:
        logits, _ = classify_noise(quant.residue, bundle.params, bundle.nc_cfg,
                                   valid_ds)
        l_nc = noise_ce(logits, nc_labels)
    total, breakdown = total_loss(l_asr, l_alpha, l_beta, l_nc, weights)
    if vq_anchor > 0:
        codes = bundle.codebook.codes[quant.indices]
        total = dc.add(total, dc.scale(
            vq_anchor_loss(latents, codes, valid_ds), vq_anchor))
    return StepOutput(total, breakdown, latents.data, quant)


def capture_freeze(bundle: ModelBundle, noisy: np.ndarray,
                   valid_ds) -> QuantFreeze:
    """Pin quantizer decisions at the current parameters (for FD probing)."""
    with dc.no_grad():
        latents = latent_encode(dc.const(noisy), bundle.params,
                                bundle.codec_cfg, valid_ds)
        quant = quantize(latents, bundle.codebook, valid_ds)
    return QuantFreeze(quant.indices, latents.data.copy())


# --- inference ------------------------------------------------------------------

def transcribe(bundle: ModelBundle, emb: np.ndarray, valid_ds: int,
               beam: int = 10, temperature: float = 0.0,
               valid_frames: int | None = None):
    """Run one embedding through the codec and decode a transcript."""
    with dc.no_grad():
        _, _, decoded = noisy_path(bundle, dc.const(emb), valid_ds)
    return beam_decode(decoded.data, bundle.decoder, bundle.dec_cfg,
                       beam=beam, temperature=temperature,
                       mem_valid=valid_frames)


def zero_shot_transcribe(decoder: dc.ParamSet, dec_cfg: DecoderConfig,
                         emb: np.ndarray, beam: int = 10,
                         temperature: float = 0.0, valid_frames=None):
    """Feed a raw frozen-encoder embedding straight to the decoder."""
    return beam_decode(emb, decoder, dec_cfg, beam=beam,
                       temperature=temperature, mem_valid=valid_frames)


def encode_tokens(bundle: ModelBundle, emb: np.ndarray,
                  valid_ds: int) -> QuantOut:
    """Quantizer output (indices, codes, residue) for one embedding."""
    with dc.no_grad():
        latents = latent_encode(dc.const(emb), bundle.params,
                                bundle.codec_cfg, valid_ds)
        return quantize(latents, bundle.codebook, valid_ds)


def noise_logits(bundle: ModelBundle, emb: np.ndarray, valid_ds: int):
    """Classifier logits + penultimate features for one embedding."""
    with dc.no_grad():
        quant = encode_tokens(bundle, emb, valid_ds)
        logits, feats = classify_noise(quant.residue, bundle.params,
                                       bundle.nc_cfg, valid_ds)
    return logits.data, feats.data


def transcribe_many(bundle: ModelBundle, data: CorpusData, indices,
                    beam: int = 1, temperature: float = 0.0,
                    use_clean: bool = False, batch: int = 32) -> list:
    """Codec-path transcription over many records (forward pass batched)."""
    hyps = []
    indices = list(indices)
    for lo in range(0, len(indices), batch):
        chunk = indices[lo:lo + batch]
        clean, noisy, valid, valid_ds, _, _ = data.batch(chunk)
        emb = clean if use_clean else noisy
        with dc.no_grad():
            _, _, decoded = noisy_path(bundle, dc.const(emb), valid_ds)
        for row, v in zip(decoded.data, valid):
            hyps.append(beam_decode(row, bundle.decoder, bundle.dec_cfg,
                                    beam=beam, temperature=temperature,
                                    mem_valid=int(v)))
    return hyps


def zero_shot_many(decoder: dc.ParamSet, dec_cfg: DecoderConfig,
                   data: CorpusData, indices, beam: int = 1,
                   temperature: float = 0.0, use_clean: bool = False) -> list:
    """Raw-embedding transcription (no codec) over many records."""
    hyps = []
    for i in indices:
        e_clean, e_noisy, valid = data.entry(i)
        emb = (e_clean if use_clean else e_noisy)[:valid].astype(np.float64)
        hyps.append(beam_decode(emb, decoder, dec_cfg, beam=beam,
                                temperature=temperature, mem_valid=valid))
    return hyps


def classify_many(bundle: ModelBundle, data: CorpusData, indices,
                  use_clean: bool = False, batch: int = 64
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Predicted local noise labels and penultimate features, batched."""
    preds, feats = [], []
    indices = list(indices)
    for lo in range(0, len(indices), batch):
        chunk = indices[lo:lo + batch]
        clean, noisy, _, valid_ds, _, _ = data.batch(chunk)
        emb = clean if use_clean else noisy
        with dc.no_grad():
            latents = latent_encode(dc.const(emb), bundle.params,
                                    bundle.codec_cfg, valid_ds)
            quant = quantize(latents, bundle.codebook, valid_ds)
            logits, f = classify_noise(quant.residue, bundle.params,
                                       bundle.nc_cfg, valid_ds)
        preds.append(logits.data.argmax(axis=-1))
        feats.append(f.data)
    return np.concatenate(preds), np.concatenate(feats)


# --- checkpoint payload -----------------------------------------------------------

def bundle_state_arrays(bundle: ModelBundle) -> dict[str, np.ndarray]:
    arrays = bundle.params.state_arrays("model.")
    arrays.update(bundle.codebook.state_arrays("cb."))
    arrays.update(bundle.decoder.state_arrays("frozen."))
    return arrays


def bundle_load_arrays(bundle: ModelBundle, arrays: dict) -> None:
    bundle.params.load_arrays(arrays, "model.")
    bundle.codebook.load_arrays(arrays, "cb.")
    bundle.decoder.load_arrays(arrays, "frozen.")
