"""Tiny autoregressive transcript decoder, pre-trained on clean embeddings
and frozen afterwards. It supplies the ASR cross-entropy that trains the
codec, and beam-search decoding for WER evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .blocks import (causal_mask, init_layer_norm, init_tensor,
                     key_padding_mask, sinusoid_table)
from .optim import AdamW, clip_global_norm
from .util import rng_for

PAD, BOS, EOS = 0, 1, 2
N_SPECIALS = 3


class PretrainFailure(RuntimeError):
    """Decoder did not reach the clean-WER threshold within budget."""


@dataclass
class DecoderConfig:
    vocab_size: int = 33          # lexicon words + PAD/BOS/EOS
    layers: int = 2
    width: int = 64
    max_len: int = 10             # longest transcript + BOS/EOS
    ffn_dim: int = 128
    mem_dim: int = 64

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocabulary must hold at least one word + specials")
        if self.max_len < 3:
            raise ValueError("max_len too small for BOS/EOS wrapping")


def words_to_tokens(words) -> list[int]:
    return [w + N_SPECIALS for w in words]


def tokens_to_words(tokens) -> list[int]:
    return [t - N_SPECIALS for t in tokens if t >= N_SPECIALS]


@dataclass
class BeamHyp:
    tokens: list[int]   # generated tokens, EOS stripped
    score: float        # length-normalized log probability
    ended: bool         # False when no EOS appeared within max_len


def init_decoder_params(cfg: DecoderConfig, seed: int) -> dc.ParamSet:
    ps = dc.ParamSet()
    init_tensor(ps, "dec.tok_emb", (cfg.vocab_size, cfg.width), seed, scale=0.5)
    for i in range(cfg.layers):
        p = f"dec.l{i}"
        init_layer_norm(ps, f"{p}.ln_sa", cfg.width)
        for nm in ("wq", "wk", "wv"):
            init_tensor(ps, f"{p}.sa.{nm}", (cfg.width, cfg.width), seed)
        init_tensor(ps, f"{p}.sa.wo", (cfg.width, cfg.width), seed, zero=True)
        ps.add(f"{p}.sa.bo", np.zeros(cfg.width))
        init_layer_norm(ps, f"{p}.ln_ca", cfg.width)
        init_layer_norm(ps, f"{p}.ln_mem", cfg.mem_dim)
        init_tensor(ps, f"{p}.ca.wq", (cfg.width, cfg.width), seed)
        init_tensor(ps, f"{p}.ca.wk", (cfg.mem_dim, cfg.width), seed)
        init_tensor(ps, f"{p}.ca.wv", (cfg.mem_dim, cfg.width), seed)
        init_tensor(ps, f"{p}.ca.wo", (cfg.width, cfg.width), seed, zero=True)
        ps.add(f"{p}.ca.bo", np.zeros(cfg.width))
        init_layer_norm(ps, f"{p}.ln_ff", cfg.width)
        init_tensor(ps, f"{p}.ff.w1", (cfg.width, cfg.ffn_dim), seed)
        ps.add(f"{p}.ff.b1", np.zeros(cfg.ffn_dim))
        init_tensor(ps, f"{p}.ff.w2", (cfg.ffn_dim, cfg.width), seed, zero=True)
        ps.add(f"{p}.ff.b2", np.zeros(cfg.width))
    init_layer_norm(ps, "dec.ln_out", cfg.width)
    init_tensor(ps, "dec.out.w", (cfg.width, cfg.vocab_size), seed)
    ps.add("dec.out.b", np.zeros(cfg.vocab_size))
    return ps


def decoder_logits(token_ids: np.ndarray, memory: dc.Tensor,
                   params: dc.ParamSet, cfg: DecoderConfig,
                   mem_valid=None) -> dc.Tensor:
    """Teacher-forced forward: (B, L) token ids + (B, T, Dmem) memory ->
    (B, L, V) next-token logits. Cross-attention masks memory frames at
    or past mem_valid."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    b, length = ids.shape
    if length > cfg.max_len:
        raise dc.ContractError(f"sequence length {length} exceeds max_len")
    x = dc.add(dc.embedding_lookup(params["dec.tok_emb"], ids),
               dc.const(sinusoid_table(length, cfg.width)))
    mem = dc.add(memory, dc.const(sinusoid_table(memory.shape[-2], cfg.mem_dim)))
    mask = causal_mask(length)
    mem_mask = key_padding_mask(memory.shape[-2], mem_valid)
    for i in range(cfg.layers):
        p = f"dec.l{i}"
        h = dc.layer_norm(x, params[f"{p}.ln_sa.gamma"], params[f"{p}.ln_sa.beta"])
        att = dc.scaled_dot_attention(dc.matmul(h, params[f"{p}.sa.wq"]),
                                      dc.matmul(h, params[f"{p}.sa.wk"]),
                                      dc.matmul(h, params[f"{p}.sa.wv"]), mask)
        x = dc.add(x, dc.linear(att, params[f"{p}.sa.wo"], params[f"{p}.sa.bo"]))
        h = dc.layer_norm(x, params[f"{p}.ln_ca.gamma"], params[f"{p}.ln_ca.beta"])
        m = dc.layer_norm(mem, params[f"{p}.ln_mem.gamma"], params[f"{p}.ln_mem.beta"])
        att = dc.scaled_dot_attention(dc.matmul(h, params[f"{p}.ca.wq"]),
                                      dc.matmul(m, params[f"{p}.ca.wk"]),
                                      dc.matmul(m, params[f"{p}.ca.wv"]), mem_mask)
        x = dc.add(x, dc.linear(att, params[f"{p}.ca.wo"], params[f"{p}.ca.bo"]))
        h = dc.layer_norm(x, params[f"{p}.ln_ff.gamma"], params[f"{p}.ln_ff.beta"])
        h = dc.gelu(dc.linear(h, params[f"{p}.ff.w1"], params[f"{p}.ff.b1"]))
        x = dc.add(x, dc.linear(h, params[f"{p}.ff.w2"], params[f"{p}.ff.b2"]))
    x = dc.layer_norm(x, params["dec.ln_out.gamma"], params["dec.ln_out.beta"])
    return dc.linear(x, params["dec.out.w"], params["dec.out.b"])


def _teacher_arrays(transcripts, cfg: DecoderConfig):
    """BOS-led inputs, shifted targets, and a token mask, padded to batch."""
    seqs = [words_to_tokens(t) for t in transcripts]
    for s in seqs:
        if len(s) + 2 > cfg.max_len:
            raise dc.ContractError("transcript exceeds decoder max_len")
    length = max(len(s) for s in seqs) + 1
    b = len(seqs)
    inputs = np.full((b, length), PAD, dtype=np.int64)
    targets = np.full((b, length), PAD, dtype=np.int64)
    mask = np.zeros((b, length))
    for i, s in enumerate(seqs):
        inputs[i, 0] = BOS
        inputs[i, 1:len(s) + 1] = s
        targets[i, :len(s)] = s
        targets[i, len(s)] = EOS
        mask[i, :len(s) + 1] = 1.0
    return inputs, targets, mask


def asr_ce(decoded_emb: dc.Tensor, transcripts, params: dc.ParamSet,
           cfg: DecoderConfig, mem_valid=None) -> dc.Tensor:
    """Teacher-forced next-token cross-entropy, averaged over tokens.

    Accepts a single (T, D) embedding with one transcript or a batched
    (B, T, D) input with a list of transcripts. The decoder must already
    be frozen: gradients flow only into decoded_emb.
    """
    single = decoded_emb.data.ndim == 2
    if single:
        decoded_emb = dc.reshape(decoded_emb, (1,) + decoded_emb.shape)
        transcripts = [transcripts]
    inputs, targets, mask = _teacher_arrays(transcripts, cfg)
    logits = decoder_logits(inputs, decoded_emb, params, cfg, mem_valid)
    return dc.softmax_xent_masked(logits, targets, mask)


def teacher_ce_value(emb: np.ndarray, transcript, params: dc.ParamSet,
                     cfg: DecoderConfig, mem_valid=None) -> float:
    """Teacher-forced mean token cross-entropy on raw arrays (no graph)."""
    with dc.no_grad():
        return asr_ce(dc.const(emb), transcript, params, cfg, mem_valid).item()


# --- decoding -------------------------------------------------------------

def beam_decode(decoded_emb, params: dc.ParamSet, cfg: DecoderConfig,
                beam: int = 10, temperature: float = 0.0,
                mem_valid=None) -> BeamHyp:
    """Length-normalized beam search to EOS.

    temperature 0 keeps raw log-probabilities (deterministic scoring);
    positive values flatten them (still deterministic).
    """
    if beam < 1:
        raise dc.ContractError("beam must be >= 1")
    mem = decoded_emb.data if isinstance(decoded_emb, dc.Tensor) else np.asarray(decoded_emb)
    if mem.ndim != 2:
        raise dc.ContractError("beam_decode expects a single (T, D) embedding")
    alive = [([BOS], 0.0)]
    done: list[BeamHyp] = []
    with dc.no_grad():
        for _ in range(cfg.max_len - 1):
            ids = np.array([seq for seq, _ in alive], dtype=np.int64)
            memory = dc.const(np.broadcast_to(mem, (len(alive),) + mem.shape))
            logits = decoder_logits(ids, memory, params, cfg,
                                    mem_valid).data[:, -1, :]
            if temperature > 0:
                logits = logits / temperature
            logp = logits - np.log(np.exp(logits - logits.max(-1, keepdims=True))
                                   .sum(-1, keepdims=True)) - logits.max(-1, keepdims=True)
            totals = np.array([s for _, s in alive])[:, None] + logp
            flat = totals.reshape(-1)
            order = np.argsort(-flat, kind="stable")[: max(beam, 1)]
            next_alive = []
            for pos in order:
                src, tok = divmod(int(pos), cfg.vocab_size)
                seq = alive[src][0] + [tok]
                score = float(flat[pos])
                gen_len = len(seq) - 1
                if tok == EOS:
                    done.append(BeamHyp(seq[1:-1], score / gen_len, True))
                elif len(next_alive) < beam:
                    next_alive.append((seq, score))
            alive = next_alive
            if not alive:
                break
    if done:
        best = max(done, key=lambda h: (h.score, -len(h.tokens)))
        return best
    # no EOS within budget: truncate the best alive hypothesis and flag it
    seq, score = max(alive, key=lambda p: p[1] / (len(p[0]) - 1))
    return BeamHyp(seq[1:], score / (len(seq) - 1), False)


def greedy_decode(decoded_emb, params: dc.ParamSet, cfg: DecoderConfig,
                  mem_valid=None) -> BeamHyp:
    return beam_decode(decoded_emb, params, cfg, beam=1, mem_valid=mem_valid)


# --- pretraining ------------------------------------------------------------

def pretrain_decoder(train_embs: list[np.ndarray], train_transcripts,
                     val_embs: list[np.ndarray], val_transcripts,
                     cfg: DecoderConfig, seed: int,
                     train_valid=None, val_valid=None,
                     wer_threshold: float = 0.02, max_epochs: int = 60,
                     batch_size: int = 32, lr: float = 2e-3,
                     log=None) -> dc.ParamSet:
    """Train the transcript decoder on clean embeddings until its clean
    validation WER drops below the threshold, then freeze it.

    Raises PretrainFailure when the budget runs out; callers must surface
    that, not mask it.
    """
    from .metrics import micro_wer

    n = len(train_embs)
    if train_valid is None:
        train_valid = [e.shape[0] for e in train_embs]
    if val_valid is None:
        val_valid = [e.shape[0] for e in val_embs]
    params = init_decoder_params(cfg, seed)
    opt = AdamW(params, betas=(0.9, 0.95), weight_decay=0.01)
    history = []
    for epoch in range(max_epochs):
        if epoch < max_epochs // 2:
            epoch_lr = lr
        elif epoch < 3 * max_epochs // 4:
            epoch_lr = lr / 4
        else:
            epoch_lr = lr / 16
        order = rng_for(seed, "pretrain-order", epoch).permutation(n)
        for lo in range(0, n, batch_size):
            pick = order[lo:lo + batch_size]
            valid = np.array([train_valid[i] for i in pick])
            crop = int(valid.max())  # padded keys are masked; crop the rest
            emb = dc.const(np.stack([train_embs[i][:crop] for i in pick]))
            loss = asr_ce(emb, [train_transcripts[i] for i in pick], params,
                          cfg, mem_valid=valid)
            params.zero_grads()
            loss.backward()
            clip_global_norm(params, 1.0)
            opt.step(epoch_lr)
        hyps = [greedy_decode(e[:v], params, cfg, mem_valid=v).tokens
                for e, v in zip(val_embs, val_valid)]
        val = micro_wer([(ref, tokens_to_words(hyp))
                         for ref, hyp in zip(val_transcripts, hyps)])
        history.append(val)
        if log:
            log(f"pretrain epoch {epoch}: clean val WER {val:.4f}")
        if val < wer_threshold:
            params.freeze_all()
            return params
    raise PretrainFailure(
        f"clean validation WER stuck at {min(history):.4f} after "
        f"{max_epochs} epochs (threshold {wer_threshold})")
