"""Frozen-encoder latents: a deterministic synthetic encoder standing in for
a large pretrained speech encoder, plus bit-exact file I/O for externally
dumped embedding sequences (EMBSEQ1 format)."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .util import rng_for

# Desk-scale defaults. Ratios match the full-scale system (50 embeddings/sec,
# 2x temporal downsampling to 25 tokens/sec); sizes are shrunk for CPU work.
EMB_DIM = 64
SEQ_LEN = 200
FRAMES_PER_SECOND = 50.0

WINDOW_MS = 25.0
HOP_MS = 10.0
N_BANDS = 48
_FFT_N = 256
_LOG_FLOOR = 1e-8
# fixed affine keeping log-band features in a tanh-friendly range
_FEAT_SHIFT = 7.0
_FEAT_SCALE = 6.0


class SignalError(ValueError):
    pass


class EmbseqFormatError(ValueError):
    """Malformed EMBSEQ1 payload; carries the offending byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Signal:
    """Monophonic waveform, amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = 8000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.size == 0:
            raise SignalError("empty signal")
        if not np.isfinite(self.samples).all():
            raise SignalError("signal holds non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class EmbeddingSeq:
    """T' x D frame matrix with frame-rate metadata and a validity length."""

    frames: np.ndarray
    frames_per_second: float = FRAMES_PER_SECOND
    valid_len: int = field(default=-1)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("frames must be 2-D (time x dim)")
        if self.valid_len < 0:
            self.valid_len = self.frames.shape[0]

    @property
    def seq_len(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def _band_edges(sample_rate: int) -> np.ndarray:
    # Linear bands spanning the spectrum; bin 0 (DC) is excluded.
    return np.linspace(0, sample_rate / 2, N_BANDS + 1)


def _frame_features(samples: np.ndarray, sample_rate: int) -> np.ndarray:
    win = int(round(WINDOW_MS * 1e-3 * sample_rate))
    hop = int(round(HOP_MS * 1e-3 * sample_rate))
    if samples.size < win:
        raise SignalError(f"signal shorter than one window ({samples.size} < {win})")
    n_frames = 1 + (samples.size - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = samples[idx] * np.hanning(win)[None, :]
    spec = np.abs(np.fft.rfft(frames, n=_FFT_N, axis=1)) ** 2
    freqs = np.fft.rfftfreq(_FFT_N, d=1.0 / sample_rate)
    edges = _band_edges(sample_rate)
    bands = np.empty((n_frames, N_BANDS))
    for b in range(N_BANDS):
        sel = (freqs >= edges[b]) & (freqs < edges[b + 1])
        bands[:, b] = spec[:, sel].sum(axis=1)
    return (np.log(bands + _LOG_FLOOR) + _FEAT_SHIFT) / _FEAT_SCALE


def encode_synthetic(signal: Signal, encoder_seed: int) -> EmbeddingSeq:
    """Deterministic stand-in for a frozen pretrained encoder.

    Frames the signal (25 ms window / 10 ms hop), stacks consecutive frame
    pairs down to 50 frames/sec, and projects log-power band features
    through a fixed random linear map + tanh. The weights depend only on
    encoder_seed; nothing here is ever trained.
    """
    feats = _frame_features(signal.samples, signal.sample_rate)
    n_pairs = feats.shape[0] // 2
    if n_pairs == 0:
        raise SignalError("signal too short to produce a stacked frame pair")
    stacked = feats[: 2 * n_pairs].reshape(n_pairs, 2 * N_BANDS)
    rng = rng_for(encoder_seed, "synthetic-encoder")
    w = rng.normal(scale=1.0 / np.sqrt(2 * N_BANDS), size=(2 * N_BANDS, EMB_DIM))
    b = rng.normal(scale=0.1, size=EMB_DIM)
    frames = np.tanh(stacked @ w + b)
    return EmbeddingSeq(frames, FRAMES_PER_SECOND, valid_len=n_pairs)


def pad_or_trim(seq: EmbeddingSeq, target_len: int = SEQ_LEN) -> EmbeddingSeq:
    """Fix the sequence length: zero-pad the tail or drop frames past target."""
    if target_len <= 0:
        raise ValueError("target length must be positive")
    t = seq.seq_len
    if t == target_len:
        return EmbeddingSeq(seq.frames.copy(), seq.frames_per_second,
                            valid_len=min(seq.valid_len, target_len))
    if t > target_len:
        return EmbeddingSeq(seq.frames[:target_len].copy(), seq.frames_per_second,
                            valid_len=min(seq.valid_len, target_len))
    out = np.zeros((target_len, seq.dim))
    out[:t] = seq.frames
    return EmbeddingSeq(out, seq.frames_per_second, valid_len=min(seq.valid_len, t))


# --- EMBSEQ1 file format ------------------------------------------------------
# bytes 0-7   magic "EMBSEQ1\n"
# bytes 8-11  u32 LE sequence length T
# bytes 12-15 u32 LE embedding dim D
# bytes 16-19 u32 LE frames per second * 1000
# then T*D little-endian float32, row-major (time-major); no trailing bytes.

EMBSEQ_MAGIC = b"EMBSEQ1\n"
_HEADER_LEN = 20


def write_embseq(seq: EmbeddingSeq, path) -> None:
    payload = np.ascontiguousarray(seq.frames, dtype="<f4")
    header = EMBSEQ_MAGIC + struct.pack(
        "<III", seq.seq_len, seq.dim, int(round(seq.frames_per_second * 1000)))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_embseq(path) -> EmbeddingSeq:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != EMBSEQ_MAGIC:
        raise EmbseqFormatError("bad magic", 0)
    if len(blob) < _HEADER_LEN:
        raise EmbseqFormatError("truncated header", len(blob))
    t, d, fps_milli = struct.unpack("<III", blob[8:_HEADER_LEN])
    expected = _HEADER_LEN + 4 * t * d
    if len(blob) < expected:
        raise EmbseqFormatError("truncated payload", len(blob))
    if len(blob) > expected:
        raise EmbseqFormatError("trailing bytes after payload", expected)
    flat = np.frombuffer(blob, dtype="<f4", offset=_HEADER_LEN)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise EmbseqFormatError("non-finite float in payload",
                                _HEADER_LEN + 4 * int(bad[0]))
    frames = flat.astype(np.float64).reshape(t, d)
    return EmbeddingSeq(frames, fps_milli / 1000.0, valid_len=t)
