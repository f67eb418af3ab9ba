"""Synthetic paired clean/noisy corpora with transcripts and noise labels.

"Speech" is a tone-word lexicon: each word renders as a fixed harmonic
stack about 100 ms long, so transcripts stay learnable by a tiny frozen
decoder while noise mixing still happens in signal space (the frozen
encoder genuinely entangles it). Train/val share one pool of seen noise
classes; the test split draws only from held-out unseen classes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .embedding_io import Signal, encode_synthetic
from .util import rng_for, subseed

SAMPLE_RATE = 8000
N_NOISE_CLASSES = 10
# Order matters: configs take the first n_seen classes as seen and the
# next n_unseen as held out, so each held-out class has a spectrally
# related seen counterpart (hiss~crackle/white, chirp~babble/pulsetrain,
# rumble~hum).
NOISE_CLASS_NAMES = ["white", "babble", "crackle", "pulsetrain", "hum",
                     "hiss", "chirp", "rumble", "impulsive", "brown"]

# Utterance-style pools (rate/gain/pitch-offset variants); splits draw from
# disjoint pools, mirroring disjoint validation speakers. Held-out styles
# stay inside the convex hull of the training styles.
_STYLES = [  # (rate multiplier, gain, fundamental offset in Hz)
    (1.00, 0.70, 0.0), (0.94, 0.60, 8.0), (1.08, 0.80, -8.0),
    (0.96, 0.75, 14.0), (1.12, 0.65, -14.0), (1.04, 0.55, 5.0),
    (0.92, 0.78, -3.0), (1.10, 0.58, 12.0),
    (0.97, 0.68, -11.0), (1.07, 0.74, 9.0),
    (0.95, 0.63, 10.0), (1.05, 0.72, -6.0),
]
STYLE_POOLS = {"train": (0, 1, 2, 3, 4, 5, 6, 7), "val": (8, 9),
               "test": (10, 11)}


class CorpusConfigError(ValueError):
    pass


class SilentSignalError(ValueError):
    """SNR is undefined against a silent clean signal."""


@dataclass(frozen=True)
class Lexicon:
    """Tone-word vocabulary.

    Word w renders as a dominant fundamental on a 100 Hz grid plus a
    quieter secondary tone on a permuted grid, so every word carries a
    unique two-line spectral signature.
    """

    n_words: int = 30
    base_hz: float = 300.0
    spacing_hz: float = 100.0
    word_ms: float = 100.0
    secondary_base_hz: float = 500.0
    secondary_gain: float = 0.6

    def fundamental(self, word: int) -> float:
        if not 0 <= word < self.n_words:
            raise ValueError(f"word id {word} outside lexicon")
        return self.base_hz + self.spacing_hz * word

    def secondary(self, word: int) -> float:
        if not 0 <= word < self.n_words:
            raise ValueError(f"word id {word} outside lexicon")
        # 7 is coprime with n_words=30, so the grid is a permutation
        return self.secondary_base_hz + self.spacing_hz * ((word * 7) % self.n_words)


@dataclass
class PairExample:
    clean: Signal
    noisy: Signal
    transcript: list[int]
    noise_label: int | None  # None marks a clean-only example
    snr_db: float


@dataclass
class CorpusConfig:
    master_seed: int = 7
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 300
    n_seen: int = 5
    n_unseen: int = 3
    snr_lo: float = 0.0
    snr_hi: float = 15.0
    lexicon: Lexicon = field(default_factory=Lexicon)

    def __post_init__(self):
        if self.n_seen + self.n_unseen > N_NOISE_CLASSES:
            raise CorpusConfigError(
                f"{self.n_seen} seen + {self.n_unseen} unseen noise classes "
                f"exceed the {N_NOISE_CLASSES} implemented")

    @property
    def seen_classes(self) -> list[int]:
        return list(range(self.n_seen))

    @property
    def unseen_classes(self) -> list[int]:
        return list(range(self.n_seen, self.n_seen + self.n_unseen))


@dataclass
class CorpusManifest:
    split: str
    records: list[dict]
    seen_noise_classes: list[int]
    unseen_noise_classes: list[int]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, split: str, seen: list[int], unseen: list[int]) -> "CorpusManifest":
        records = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
        return cls(split, records, seen, unseen)


# --- utterance rendering ------------------------------------------------------

def _render_word(word: int, lexicon: Lexicon, style, rng: np.random.Generator,
                 sample_rate: int) -> np.ndarray:
    rate, gain, f_off = style
    # per-word jitter is wider than the style offsets so that unseen styles
    # stay inside the rendered training distribution
    dur = lexicon.word_ms * 1e-3 * rate * rng.uniform(0.90, 1.10)
    n = max(1, int(round(dur * sample_rate)))
    t = np.arange(n) / sample_rate
    f0 = lexicon.fundamental(word) + f_off + rng.uniform(-6.0, 6.0)
    f1 = lexicon.secondary(word) + f_off + rng.uniform(-6.0, 6.0)
    sig = (np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
           + lexicon.secondary_gain
           * np.sin(2 * np.pi * f1 * t + rng.uniform(0, 2 * np.pi)))
    ramp = max(1, int(0.01 * sample_rate))
    env = np.ones(n)
    env[:ramp] = np.linspace(0, 1, ramp)
    env[-ramp:] = np.linspace(1, 0, ramp)
    amp = gain * rng.uniform(0.85, 1.0)
    return amp * env * sig / (1.0 + lexicon.secondary_gain)


def _gen_utterance_full(seed: int, vocab: Lexicon, style_pool,
                        sample_rate: int) -> tuple[Signal, list[int], int]:
    rng = rng_for(seed, "utterance")
    n_words = int(rng.integers(3, 9))
    words = [int(w) for w in rng.integers(0, vocab.n_words, size=n_words)]
    style_id = style_pool[int(rng.integers(len(style_pool)))]
    style = _STYLES[style_id]
    lead = np.zeros(int(0.03 * sample_rate))
    pieces = [lead]
    for w in words:
        pieces.append(_render_word(w, vocab, style, rng, sample_rate))
        gap = rng.uniform(0.02, 0.04)
        pieces.append(np.zeros(int(gap * sample_rate)))
    samples = np.concatenate(pieces)
    return Signal(samples, sample_rate), words, style_id


def gen_utterance(seed: int, vocab: Lexicon,
                  style_pool=STYLE_POOLS["train"],
                  sample_rate: int = SAMPLE_RATE) -> tuple[Signal, list[int]]:
    """Render a 3-8 word utterance; fully determined by (seed, vocab, pool)."""
    signal, words, _ = _gen_utterance_full(seed, vocab, style_pool, sample_rate)
    return signal, words


# --- noise rendering ----------------------------------------------------------

def _one_pole_lowpass(x: np.ndarray, fc: float, sr: int) -> np.ndarray:
    a = math.exp(-2 * math.pi * fc / sr)
    return lfilter([1.0 - a], [1.0, -a], x)


def _bandpass(x: np.ndarray, lo: float, hi: float, sr: int) -> np.ndarray:
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(x.size, 1.0 / sr)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    return np.fft.irfft(spec, n=x.size)


def _am(x: np.ndarray, rate_hz: float, depth: float, sr: int,
        phase: float = 0.0) -> np.ndarray:
    t = np.arange(x.size) / sr
    return x * (1.0 - depth * 0.5 * (1.0 + np.sin(2 * np.pi * rate_hz * t + phase)))


def _noise_white(t, n, sr, rng):
    return rng.normal(size=n)


def _noise_babble(t, n, sr, rng):
    x = _bandpass(rng.normal(size=n), 300.0, 1400.0, sr)
    return _am(x, 6.0, 0.9, sr, rng.uniform(0, 2 * np.pi))


def _noise_impulsive(t, n, sr, rng):
    x = np.zeros(n)
    period = int(sr / 4.0)
    kernel = np.exp(-np.arange(int(0.005 * sr)) / (0.0012 * sr))
    for start in range(int(rng.integers(0, period)), n, period):
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.8, 1.2)
        seg = min(kernel.size, n - start)
        x[start:start + seg] += amp * kernel[:seg]
    return x


def _noise_crackle(t, n, sr, rng):
    # high-band sparse bursts: the seen cousin of band-limited hiss
    x = _bandpass(rng.normal(size=n), 1500.0, 3500.0, sr)
    gate = ((t * 8.0 + rng.uniform(0, 1)) % 1.0) < 0.35
    return x * gate


def _noise_pulsetrain(t, n, sr, rng):
    x = _bandpass(rng.normal(size=n), 800.0, 1300.0, sr)
    gate = ((t * 9.0 + rng.uniform(0, 1)) % 1.0) < 0.45
    return x * gate


def _noise_hum(t, n, sr, rng):
    x = (np.sin(2 * np.pi * 60.0 * t + rng.uniform(0, 2 * np.pi))
         + 0.6 * np.sin(2 * np.pi * 120.0 * t + rng.uniform(0, 2 * np.pi))
         + 0.4 * np.sin(2 * np.pi * 180.0 * t + rng.uniform(0, 2 * np.pi)))
    return _am(x, 13.0, 0.5, sr, rng.uniform(0, 2 * np.pi))


def _noise_hiss(t, n, sr, rng):
    x = _bandpass(rng.normal(size=n), 2000.0, 3500.0, sr)
    return _am(x, 25.0, 0.7, sr, rng.uniform(0, 2 * np.pi))


def _noise_chirp(t, n, sr, rng):
    period = 1.0 / 1.5
    ph = (t + rng.uniform(0, period)) % period
    f = 500.0 + (2500.0 - 500.0) * (ph / period)
    x = np.sin(2 * np.pi * np.cumsum(f) / sr)
    x[ph > 0.7 * period] = 0.0
    return x


def _noise_rumble(t, n, sr, rng):
    x = _one_pole_lowpass(rng.normal(size=n), 120.0, sr)
    return _am(x, 2.5, 0.9, sr, rng.uniform(0, 2 * np.pi))


def _noise_tonecluster(t, n, sr, rng):
    return (np.sin(2 * np.pi * 3100.0 * t + rng.uniform(0, 2 * np.pi))
            + 0.8 * np.sin(2 * np.pi * 3250.0 * t + rng.uniform(0, 2 * np.pi))
            + 0.6 * np.sin(2 * np.pi * 3400.0 * t + rng.uniform(0, 2 * np.pi)))


def _noise_brown(t, n, sr, rng):
    x = np.cumsum(rng.normal(size=n))
    return x - _one_pole_lowpass(x, 15.0, sr)  # remove drift below ~15 Hz


_NOISE_RENDERERS = [_noise_white, _noise_babble, _noise_crackle,
                    _noise_pulsetrain, _noise_hum, _noise_hiss, _noise_chirp,
                    _noise_rumble, _noise_impulsive, _noise_brown]


def _render_noise(noise_class: int, n: int, sr: int,
                  rng: np.random.Generator) -> np.ndarray:
    if not 0 <= noise_class < len(_NOISE_RENDERERS):
        raise CorpusConfigError(f"noise class {noise_class} not implemented")
    t = np.arange(n) / sr
    x = _NOISE_RENDERERS[noise_class](t, n, sr, rng)
    rms = np.sqrt(np.mean(x ** 2))
    return x / max(rms, 1e-12)


def mix_noise(clean: Signal, noise_class: int, snr_db: float, seed: int) -> Signal:
    """Add class-shaped noise at the requested SNR; +inf returns clean."""
    if not 0 <= noise_class < N_NOISE_CLASSES:
        raise CorpusConfigError(f"noise class {noise_class} not implemented")
    if math.isinf(snr_db) and snr_db > 0:
        return Signal(clean.samples.copy(), clean.sample_rate)
    p_clean = np.mean(clean.samples ** 2)
    if p_clean <= 0:
        raise SilentSignalError("SNR undefined: clean signal is silent")
    rng = rng_for(seed, "noise", noise_class)
    noise = _render_noise(noise_class, clean.samples.size, clean.sample_rate, rng)
    scale = np.sqrt(p_clean) / (10.0 ** (snr_db / 20.0))
    mixed = np.clip(clean.samples + scale * noise, -1.0, 1.0)
    return Signal(mixed, clean.sample_rate)


# --- corpus assembly ----------------------------------------------------------

def _make_record(cfg: CorpusConfig, split: str, index: int,
                 noise_classes: list[int]) -> dict:
    seed = subseed(cfg.master_seed, "corpus", split, index)
    rng = rng_for(seed, "assignment")
    noise_class = int(noise_classes[int(rng.integers(len(noise_classes)))])
    snr = float(rng.uniform(cfg.snr_lo, cfg.snr_hi))
    _, transcript, style = _gen_utterance_full(seed, cfg.lexicon,
                                               STYLE_POOLS[split], SAMPLE_RATE)
    return {
        "id": f"{split}-{index:05d}",
        "seed": seed,
        "split": split,
        "noise_class": noise_class,
        "snr_db": round(snr, 4),
        "transcript": transcript,
        "style": style,
    }


def materialize(record: dict, lexicon: Lexicon) -> PairExample:
    """Regenerate the (clean, noisy) signal pair of a manifest record."""
    split = record["split"]
    clean, transcript = gen_utterance(record["seed"], lexicon, STYLE_POOLS[split])
    if transcript != list(record["transcript"]):
        raise CorpusConfigError(f"record {record['id']}: transcript drifted")
    noisy = mix_noise(clean, record["noise_class"], record["snr_db"], record["seed"])
    return PairExample(clean, noisy, transcript, record["noise_class"],
                       record["snr_db"])


def build_corpus(cfg: CorpusConfig) -> tuple[CorpusManifest, CorpusManifest,
                                             CorpusManifest, dict]:
    """Build train/val/test manifests plus a generation summary.

    Train and validation draw only seen noise classes; test draws only
    unseen ones. The summary quantifies how strongly the frozen encoder
    leaks mixed-in noise (mean per-frame embedding distance clean vs
    noisy over a probe subset).
    """
    manifests = {}
    for split, size in (("train", cfg.n_train), ("val", cfg.n_val),
                        ("test", cfg.n_test)):
        classes = cfg.seen_classes if split in ("train", "val") else cfg.unseen_classes
        records = [_make_record(cfg, split, i, classes) for i in range(size)]
        manifests[split] = CorpusManifest(split, records, cfg.seen_classes,
                                          cfg.unseen_classes)
    leak = _noise_leak_probe(manifests["train"], cfg)
    summary = {
        "master_seed": cfg.master_seed,
        "sizes": {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test},
        "seen_noise_classes": cfg.seen_classes,
        "unseen_noise_classes": cfg.unseen_classes,
        "snr_range_db": [cfg.snr_lo, cfg.snr_hi],
        "lexicon_words": cfg.lexicon.n_words,
        "style_pools": {k: list(v) for k, v in STYLE_POOLS.items()},
        "noise_leak_mean_frame_l2": leak,
    }
    return manifests["train"], manifests["val"], manifests["test"], summary


def _noise_leak_probe(manifest: CorpusManifest, cfg: CorpusConfig,
                      probe_seed: int = 1, n_probe: int = 16) -> float:
    dists = []
    for rec in manifest.records[:n_probe]:
        pair = materialize(rec, cfg.lexicon)
        e_clean = encode_synthetic(pair.clean, probe_seed)
        e_noisy = encode_synthetic(pair.noisy, probe_seed)
        n = min(e_clean.valid_len, e_noisy.valid_len)
        d = np.linalg.norm(e_clean.frames[:n] - e_noisy.frames[:n], axis=1)
        dists.append(d.mean())
    return float(np.mean(dists)) if dists else 0.0


def save_corpus(out_dir, train: CorpusManifest, val: CorpusManifest,
                test: CorpusManifest, summary: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train.save(out / "train.jsonl")
    val.save(out / "val.jsonl")
    test.save(out / "test.jsonl")
    with open(out / "corpus_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)


def load_corpus(corpus_dir) -> tuple[CorpusManifest, CorpusManifest,
                                     CorpusManifest, dict]:
    cdir = Path(corpus_dir)
    with open(cdir / "corpus_summary.json") as fh:
        summary = json.load(fh)
    seen = summary["seen_noise_classes"]
    unseen = summary["unseen_noise_classes"]
    out = tuple(CorpusManifest.load(cdir / f"{split}.jsonl", split, seen, unseen)
                for split in ("train", "val", "test"))
    return out[0], out[1], out[2], summary
