"""Training loop: Adam with inverse-square-root warmup, early stopping, and a
synthetic motif corpus for desk-scale experiments.

Everything is driven by one seeded generator, so two runs with the same seed
produce bit-identical weights, checkpoints, and metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelWeights, backward, save_checkpoint, sequence_nll

__all__ = [
    "TrainSchedule",
    "TrainState",
    "TrainResult",
    "TrainingDiverged",
    "learning_rate_at",
    "train_step",
    "train",
    "evaluate_nll",
    "make_motif_corpus",
]


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; training aborted."""


@dataclass
class TrainSchedule:
    steps: int = 5000
    learning_rate: float = 0.1
    warmup_steps: int = 400
    val_every: int = 250
    early_stop_patience: int | None = None  # validations without improvement
    checkpoint_every: int | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9


def learning_rate_at(schedule: TrainSchedule, depth: int, step: int) -> float:
    """Inverse-square-root decay after a linear warmup, scaled by depth."""
    return (
        schedule.learning_rate
        * depth**-0.5
        * min(step**-0.5, step * schedule.warmup_steps**-1.5)
    )


@dataclass
class TrainState:
    cfg: ModelConfig
    weights: ModelWeights
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    rng: np.random.Generator

    @classmethod
    def fresh(cls, cfg: ModelConfig) -> "TrainState":
        rng = np.random.default_rng(cfg.seed)
        weights = ModelWeights.initialize(cfg, rng)
        return cls(cfg, weights, weights.zeros_like(), weights.zeros_like(), 0, rng)


def train_step(state: TrainState, tokens, schedule: TrainSchedule, token_attributes=None) -> dict:
    """One optimizer step on one cropped sequence; returns metrics."""
    nll, d_logits, cache = sequence_nll(
        state.cfg,
        state.weights,
        tokens,
        token_attributes=token_attributes,
        dropout_rng=state.rng,
    )
    if not math.isfinite(nll):
        raise TrainingDiverged(f"non-finite loss {nll} at step {state.step + 1}")
    grads = backward(cache, d_logits, state.weights)

    sq_sum = 0.0
    for name in sorted(grads):
        sq_sum += float(np.sum(grads[name] * grads[name]))
    grad_norm = math.sqrt(sq_sum)
    if not math.isfinite(grad_norm):
        raise TrainingDiverged(f"non-finite gradient norm at step {state.step + 1}")

    state.step += 1
    lr = learning_rate_at(schedule, state.cfg.depth, state.step)
    b1, b2, eps = schedule.adam_beta1, schedule.adam_beta2, schedule.adam_eps
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for name in sorted(grads):
        g = grads[name]
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + eps)
        state.weights.params[name] -= lr * update
    return {"step": state.step, "nll": nll, "grad_norm": grad_norm, "lr": lr}


def _crop(rng: np.random.Generator, seq: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    crop_len = min(len(seq), cfg.max_len)
    if cfg.attention_mode == "local":
        crop_len -= crop_len % cfg.block_length
    start = int(rng.integers(0, len(seq) - crop_len + 1))
    return seq[start : start + crop_len]


def evaluate_nll(
    cfg: ModelConfig,
    weights: ModelWeights,
    sequences,
    attrs_fn=None,
    max_len: int | None = None,
) -> float:
    """Token-weighted mean next-token NLL over leading windows of `sequences`."""
    limit = max_len if max_len is not None else cfg.max_len
    total, count = 0.0, 0
    for seq in sequences:
        seq = np.asarray(seq)
        n = min(len(seq), limit)
        if cfg.attention_mode == "local":
            n -= n % cfg.block_length
        if n < 2:
            continue
        tokens = seq[:n]
        attrs = attrs_fn(tokens) if attrs_fn is not None else None
        nll, _, _ = sequence_nll(
            cfg, weights, tokens, token_attributes=attrs, max_len=max_len
        )
        total += nll * (n - 1)
        count += n - 1
    if count == 0:
        raise ValueError("no evaluable sequences (need length >= 2)")
    return total / count


@dataclass
class TrainResult:
    weights: ModelWeights
    history: list[dict] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)
    best_val: float | None = None
    stopped_early: bool = False
    checkpoints: list[str] = field(default_factory=list)

    @property
    def final_val(self) -> float | None:
        return self.val_history[-1][1] if self.val_history else None


def train(
    cfg: ModelConfig,
    train_sequences,
    schedule: TrainSchedule,
    val_sequences=None,
    out_dir=None,
    attrs_fn=None,
    log_fn=None,
) -> TrainResult:
    """Train from scratch; deterministic given cfg.seed and the inputs.

    `attrs_fn(tokens) -> (pitches, times)` supplies codec attributes when the
    config enables pitch/time relative logits.  Checkpoints and the final
    weights land in `out_dir` when given.
    """
    train_sequences = [np.asarray(s, dtype=np.int64) for s in train_sequences]
    if not train_sequences:
        raise ValueError("empty training corpus")
    state = TrainState.fresh(cfg)
    result = TrainResult(weights=state.weights)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    best = math.inf
    stale = 0
    for _ in range(schedule.steps):
        idx = int(state.rng.integers(0, len(train_sequences)))
        tokens = _crop(state.rng, train_sequences[idx], cfg)
        attrs = attrs_fn(tokens) if attrs_fn is not None else None
        metrics = train_step(state, tokens, schedule, token_attributes=attrs)
        result.history.append(metrics)

        if schedule.checkpoint_every and state.step % schedule.checkpoint_every == 0:
            if out_path is not None:
                ckpt = out_path / f"step_{state.step:06d}.npz"
                save_checkpoint(ckpt, cfg, state.weights, step=state.step)
                result.checkpoints.append(str(ckpt))

        is_last = state.step == schedule.steps
        if val_sequences is not None and (state.step % schedule.val_every == 0 or is_last):
            val = evaluate_nll(cfg, state.weights, val_sequences, attrs_fn=attrs_fn)
            result.val_history.append((state.step, val))
            if log_fn is not None:
                log_fn(f"step {state.step}: train_nll={metrics['nll']:.4f} val_nll={val:.4f}")
            if val < best - 1e-6:
                best = val
                stale = 0
            else:
                stale += 1
                if (
                    schedule.early_stop_patience is not None
                    and stale >= schedule.early_stop_patience
                ):
                    result.stopped_early = True
                    break
        elif log_fn is not None and state.step % schedule.val_every == 0:
            log_fn(f"step {state.step}: train_nll={metrics['nll']:.4f}")

    result.best_val = None if best is math.inf else best
    result.weights = state.weights
    if out_path is not None:
        final = out_path / "final.npz"
        save_checkpoint(final, cfg, state.weights, step=state.step)
        result.checkpoints.append(str(final))
    return result


# ---------------------------------------------------------------------------
# Synthetic corpus: repeating motifs under random transposition


def make_motif_corpus(
    num_sequences: int,
    length: int,
    vocab_size: int = 64,
    motif_len: int = 8,
    seed: int = 0,
) -> list[np.ndarray]:
    """Sequences of a repeating motif, re-transposed every repetition.

    Each sequence draws its own motif and a random phase, so absolute position
    carries no information about the pattern; the next token is a function of
    tokens at fixed relative offsets (one motif period back, plus the current
    transposition observable from the running repeat).
    """
    if vocab_size < 56:
        raise ValueError("vocab_size must be >= 56 to fit motif range plus transpositions")
    rng = np.random.default_rng(seed)
    corpus = []
    for _ in range(num_sequences):
        motif = rng.integers(16, 48, size=motif_len)
        phase = int(rng.integers(0, motif_len))
        reps = (length + phase) // motif_len + 2
        offsets = rng.integers(-3, 4, size=reps)
        idx = np.arange(length) + phase
        tokens = motif[idx % motif_len] + offsets[idx // motif_len]
        corpus.append(tokens.astype(np.int64))
    return corpus
