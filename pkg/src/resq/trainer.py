"""End-to-end training: warmup + cosine learning-rate schedule, AdamW on
the trainable codec + noise head, per-step EMA codebook maintenance with
dead-code re-seeding, accuracy-scheduled noise-loss weight, epoch-level
validation, checkpointing, and the loss-ablation suite."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import (DEAD_CODE_COUNT_THRESHOLD, Codebook, CodecConfig,
                    ema_update, reseed_dead_codes)
from .datagen import CorpusManifest, Lexicon
from .decoderhead import DecoderConfig, tokens_to_words
from .losses import LossBreakdown, LossWeights
from .metrics import micro_wer, write_rows_csv
from .noisehead import NoiseHeadConfig, relabel_unknown, schedule_w_nc
from .optim import AdamW, clip_global_norm
from .pipeline import (CorpusData, LabelSpace, ModelBundle, build_model,
                       bundle_load_arrays, bundle_state_arrays, classify_many,
                       train_loss, transcribe_many)
from .util import rng_for, subseed


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_init: float = 1e-3
    warmup_steps: int = 500
    total_steps: int = 5000
    betas: tuple = (0.9, 0.95)
    batch_size: int = 16
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    w_asr: float = 1.0
    w_alpha: float = 0.5
    w_beta: float = 0.5
    w_nc_max: float = 0.5
    vq_anchor: float = 0.25
    enable_alpha: bool = True
    enable_beta: bool = True
    enable_nc: bool = True
    seed: int = 0
    encoder_seed: int = 1
    patience_epochs: int = 5
    val_beam: int = 1
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    codec: CodecConfig = field(default_factory=CodecConfig)

    def weights(self, w_nc: float) -> LossWeights:
        return LossWeights(
            self.w_asr,
            self.w_alpha if self.enable_alpha else 0.0,
            self.w_beta if self.enable_beta else 0.0,
            w_nc if self.enable_nc else 0.0)

    def as_meta(self) -> dict:
        meta = asdict(self)
        meta["betas"] = list(self.betas)
        return meta


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_init, then cosine annealing to zero."""
    if not 0 <= step <= cfg.total_steps:
        raise dc.ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_init * step / cfg.warmup_steps
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_init * 0.5 * (1.0 + math.cos(math.pi * (step - cfg.warmup_steps) / span))


def ablation_suite(base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """Loss-term ablation rows, weakest supervision first."""
    return [
        ("asr_only", replace(base, enable_nc=False, enable_alpha=False, enable_beta=False)),
        ("asr_nc", replace(base, enable_nc=True, enable_alpha=False, enable_beta=False)),
        ("asr_nc_alpha", replace(base, enable_nc=True, enable_alpha=True, enable_beta=False)),
        ("asr_nc_beta", replace(base, enable_nc=True, enable_alpha=False, enable_beta=True)),
        ("full", replace(base, enable_nc=True, enable_alpha=True, enable_beta=True)),
    ]


@dataclass
class TrainResult:
    history: list[dict]
    best_val_wer: float
    best_epoch: int
    best_path: str | None
    last_path: str | None
    bundle: ModelBundle
    loss_log: list[dict]


class Trainer:
    """One training run over a corpus with a frozen decoder."""

    def __init__(self, cfg: TrainConfig, bundle: ModelBundle,
                 train_data: CorpusData, val_data: CorpusData,
                 label_space: LabelSpace, out_dir=None, log=None):
        self.cfg = cfg
        self.bundle = bundle
        self.train_data = train_data
        self.val_data = val_data
        self.labels = label_space
        self.out_dir = Path(out_dir) if out_dir else None
        self.log = log or (lambda msg: None)
        self.opt = AdamW(bundle.params, betas=cfg.betas,
                         weight_decay=cfg.weight_decay)
        self.step = 0
        self.epoch = 0
        self.w_nc = cfg.w_nc_max * (1.0 - 1.0 / label_space.n_classes)
        self.best_val_wer = math.inf
        self.best_epoch = -1
        self.epochs_since_improve = 0
        self.initial_loss = math.nan
        self.divergence_run = 0
        self.dead_all_epoch = np.ones(bundle.codebook.n_codes, dtype=bool)
        self.recent_latents = np.zeros((0, cfg.codec.d))
        self.history: list[dict] = []
        self.loss_log: list[dict] = []
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # --- single step ---------------------------------------------------------
    def _nc_labels(self, records) -> list[int]:
        out = []
        for rec in records:
            local = self.labels.to_local(rec["noise_class"])
            out.append(relabel_unknown(rec["seed"], local, self.bundle.nc_cfg))
        return out

    def train_step(self, indices) -> LossBreakdown:
        cfg = self.cfg
        clean, noisy, valid, valid_ds, transcripts, recs = \
            self.train_data.batch(indices)
        weights = cfg.weights(self.w_nc)
        try:
            out = train_loss(self.bundle, clean, noisy, valid, valid_ds,
                             transcripts, self._nc_labels(recs), weights,
                             vq_anchor=cfg.vq_anchor)
        except dc.NonFiniteError as exc:
            self._dump_abort(str(exc))
            raise TrainingAborted(f"non-finite loss at step {self.step}") from exc
        any_active = (weights.w_asr > 0 or weights.w_alpha > 0
                      or weights.w_beta > 0 or weights.w_nc > 0)
        if any_active:
            self.bundle.params.zero_grads()
            out.total.backward()
            clip_global_norm(self.bundle.params, cfg.clip_norm)
            self.opt.step(lr_schedule(self.step, cfg))
        ema_update(self.bundle.codebook, out.latents, out.quant)
        self._track_codebook(out)
        self.step += 1
        bd = out.breakdown
        self.loss_log.append({"step": self.step, **bd.as_dict()})
        self._check_divergence(bd.total)
        return bd

    def _track_codebook(self, out) -> None:
        counts = self.bundle.codebook.ema_counts
        self.dead_all_epoch &= counts < DEAD_CODE_COUNT_THRESHOLD
        t = out.latents.shape[-2]
        vl = np.asarray(out.quant.valid_len).reshape(-1, 1)
        mask = (np.arange(t) < vl)
        lat = out.latents.reshape(-1, t, out.latents.shape[-1])[mask]
        self.recent_latents = lat[-512:].copy()

    def _check_divergence(self, total: float) -> None:
        if math.isnan(self.initial_loss):
            self.initial_loss = max(total, 1e-9)
            return
        if total > self.cfg.divergence_factor * self.initial_loss:
            self.divergence_run += 1
        else:
            self.divergence_run = 0
        if self.divergence_run >= self.cfg.divergence_patience:
            self._dump_abort(f"loss {total:.4g} above "
                             f"{self.cfg.divergence_factor}x initial for "
                             f"{self.divergence_run} steps")
            raise TrainingAborted(f"divergence detected at step {self.step}")

    def _dump_abort(self, reason: str) -> None:
        if not self.out_dir:
            return
        dump = {"step": self.step, "epoch": self.epoch, "reason": reason,
                "config": self.cfg.as_meta(),
                "last_losses": self.loss_log[-5:]}
        with open(self.out_dir / "abort_dump.json", "w") as fh:
            json.dump(dump, fh, indent=2)

    # --- validation ----------------------------------------------------------
    def validate(self) -> dict:
        idx = range(len(self.val_data))
        hyps = transcribe_many(self.bundle, self.val_data, idx,
                               beam=self.cfg.val_beam)
        pairs = [(self.val_data.record(i)["transcript"], tokens_to_words(h.tokens))
                 for i, h in zip(idx, hyps)]
        val_wer = micro_wer(pairs)
        preds, _ = classify_many(self.bundle, self.val_data, idx)
        truth = np.array([self.labels.to_local(self.val_data.record(i)["noise_class"])
                          for i in idx])
        nc_acc = float((preds == truth).mean())
        return {"val_wer": val_wer, "nc_accuracy": nc_acc}

    def codebook_usage(self) -> float:
        """Fraction of non-padding codes used on the validation split."""
        used = set()
        from .pipeline import encode_tokens
        for i in range(len(self.val_data)):
            _, e_noisy, valid = self.val_data.entry(i)
            q = encode_tokens(self.bundle, e_noisy.astype(np.float64),
                              (valid + 1) // 2)
            used.update(np.unique(q.indices[:(valid + 1) // 2]).tolist())
        used.discard(self.bundle.codebook.padding_index)
        return len(used) / (self.bundle.codebook.n_codes - 1)

    # --- epoch loop ------------------------------------------------------------
    def fit(self) -> TrainResult:
        cfg = self.cfg
        n = len(self.train_data)
        steps_per_epoch = math.ceil(n / cfg.batch_size)
        metrics = self.validate()
        self.w_nc = schedule_w_nc(metrics["nc_accuracy"], cfg.w_nc_max)
        self._record_epoch(metrics, train_loss_mean=math.nan)
        while self.step < cfg.total_steps:
            self.dead_all_epoch[:] = True
            order = rng_for(cfg.seed, "order", self.epoch).permutation(n)
            epoch_losses = []
            for lo in range(0, n, cfg.batch_size):
                if self.step >= cfg.total_steps:
                    break
                bd = self.train_step(order[lo:lo + cfg.batch_size])
                epoch_losses.append(bd.total)
            self.epoch += 1
            n_reseeded = reseed_dead_codes(
                self.bundle.codebook, self.dead_all_epoch, self.recent_latents,
                subseed(cfg.seed, "reseed", self.epoch))
            metrics = self.validate()
            self.w_nc = schedule_w_nc(metrics["nc_accuracy"], cfg.w_nc_max)
            improved = metrics["val_wer"] < self.best_val_wer - 1e-12
            if improved:
                self.best_val_wer = metrics["val_wer"]
                self.best_epoch = self.epoch
                self.epochs_since_improve = 0
                if self.out_dir:
                    self.save(self.out_dir / "checkpoint_best.ckpt")
            else:
                self.epochs_since_improve += 1
            self._record_epoch(metrics,
                               train_loss_mean=float(np.mean(epoch_losses)),
                               n_reseeded=n_reseeded)
            self.log(f"epoch {self.epoch} step {self.step}: "
                     f"loss {np.mean(epoch_losses):.4f} "
                     f"val WER {metrics['val_wer']:.4f} "
                     f"nc acc {metrics['nc_accuracy']:.4f} w_nc {self.w_nc:.3f}")
            if self.out_dir:
                self.save(self.out_dir / "checkpoint_last.ckpt")
                self._write_logs()
            if self.epochs_since_improve >= cfg.patience_epochs:
                break
        if self.out_dir and self.best_epoch < 0:
            self.save(self.out_dir / "checkpoint_best.ckpt")
        if self.out_dir:
            self._write_logs()
        return TrainResult(
            self.history, self.best_val_wer, self.best_epoch,
            str(self.out_dir / "checkpoint_best.ckpt") if self.out_dir else None,
            str(self.out_dir / "checkpoint_last.ckpt") if self.out_dir else None,
            self.bundle, self.loss_log)

    def _record_epoch(self, metrics: dict, train_loss_mean: float,
                      n_reseeded: int = 0) -> None:
        self.history.append({
            "epoch": self.epoch, "step": self.step,
            "lr": lr_schedule(min(self.step, self.cfg.total_steps), self.cfg),
            "train_loss_mean": train_loss_mean,
            "val_wer": metrics["val_wer"],
            "nc_accuracy": metrics["nc_accuracy"],
            "w_nc": self.w_nc, "n_reseeded": n_reseeded,
        })

    def _write_logs(self) -> None:
        write_rows_csv(
            self.out_dir / "loss_log.csv",
            ["step", "l_asr", "l_alpha", "l_beta", "l_nc", "w_nc", "total"],
            [[r["step"], f"{r['l_asr']:.17g}", f"{r['l_alpha']:.17g}",
              f"{r['l_beta']:.17g}", f"{r['l_nc']:.17g}", f"{r['w_nc']:.17g}",
              f"{r['total']:.17g}"] for r in self.loss_log])
        write_rows_csv(
            self.out_dir / "epoch_metrics.csv",
            ["epoch", "step", "lr", "train_loss_mean", "val_wer",
             "nc_accuracy", "w_nc", "n_reseeded"],
            [[r["epoch"], r["step"], f"{r['lr']:.17g}",
              f"{r['train_loss_mean']:.17g}", f"{r['val_wer']:.17g}",
              f"{r['nc_accuracy']:.17g}", f"{r['w_nc']:.17g}", r["n_reseeded"]]
             for r in self.history])

    # --- checkpointing -----------------------------------------------------------
    def save(self, path) -> None:
        arrays = bundle_state_arrays(self.bundle)
        arrays.update(self.opt.state_arrays())
        arrays["trainer.dead_all_epoch"] = self.dead_all_epoch.astype(np.int64)
        arrays["trainer.recent_latents"] = self.recent_latents.copy()
        arrays["trainer.scalars"] = np.array([
            self.step, self.epoch, self.w_nc, self.best_val_wer,
            self.best_epoch, self.epochs_since_improve, self.initial_loss,
            self.divergence_run], dtype=np.float64)
        meta = {
            "train_config": self.cfg.as_meta(),
            "codec_config": asdict(self.bundle.codec_cfg),
            "nc_config": asdict(self.bundle.nc_cfg),
            "dec_config": asdict(self.bundle.dec_cfg),
            "label_space": self.labels.seen_classes,
            "encoder_seed": self.bundle.encoder_seed,
            "seq_len": self.bundle.seq_len,
            "history": self.history,
            "loss_log_len": len(self.loss_log),
        }
        save_checkpoint(path, arrays, meta)

    def load_state(self, path) -> None:
        arrays, meta = load_checkpoint(path)
        bundle_load_arrays(self.bundle, arrays)
        self.opt.load_arrays(arrays)
        self.dead_all_epoch = arrays["trainer.dead_all_epoch"].astype(bool)
        self.recent_latents = arrays["trainer.recent_latents"].copy()
        (step, epoch, w_nc, best, best_ep, since, init, div) = \
            arrays["trainer.scalars"]
        self.step = int(step)
        self.epoch = int(epoch)
        self.w_nc = float(w_nc)
        self.best_val_wer = float(best)
        self.best_epoch = int(best_ep)
        self.epochs_since_improve = int(since)
        self.initial_loss = float(init)
        self.divergence_run = int(div)
        self.history = list(meta["history"])


def make_trainer(cfg: TrainConfig, train_manifest: CorpusManifest,
                 val_manifest: CorpusManifest, lexicon: Lexicon,
                 decoder: dc.ParamSet, dec_cfg: DecoderConfig,
                 nc_cfg: NoiseHeadConfig | None = None,
                 out_dir=None, log=None) -> Trainer:
    label_space = LabelSpace(list(train_manifest.seen_noise_classes))
    if nc_cfg is None:
        nc_cfg = NoiseHeadConfig(n_classes=label_space.n_classes,
                                 d=cfg.codec.d)
    bundle = build_model(cfg.codec, nc_cfg, dec_cfg, decoder,
                         cfg.encoder_seed, cfg.seed)
    train_data = CorpusData(train_manifest, lexicon, cfg.encoder_seed)
    val_data = CorpusData(val_manifest, lexicon, cfg.encoder_seed)
    return Trainer(cfg, bundle, train_data, val_data, label_space,
                   out_dir=out_dir, log=log)


def load_bundle_from_checkpoint(path, decoder_fallback=None) -> tuple[ModelBundle, dict]:
    """Rebuild a ModelBundle (with its frozen decoder) from a checkpoint."""
    arrays, meta = load_checkpoint(path)
    codec_cfg = CodecConfig(**meta["codec_config"])
    nc_cfg = NoiseHeadConfig(**meta["nc_config"])
    dec_cfg = DecoderConfig(**meta["dec_config"])
    from .decoderhead import init_decoder_params
    decoder = init_decoder_params(dec_cfg, seed=0)
    decoder.freeze_all()
    bundle = build_model(codec_cfg, nc_cfg, dec_cfg, decoder,
                         meta["encoder_seed"], seed=0,
                         seq_len=meta.get("seq_len", 200))
    bundle_load_arrays(bundle, arrays)
    return bundle, meta
