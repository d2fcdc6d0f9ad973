"""Autoregressive sampling with priming and attention-trace export."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .model import AttentionTrace, ModelConfig, ModelWeights, build_trace, forward
from .tensor import softmax_rows_nd

__all__ = ["SampleLengthError", "sample"]


class SampleLengthError(RuntimeError):
    """Requested generation beyond the trained length with absolute positions.

    Models relying on absolute position signals have no meaningful signal past
    the trained maximum; only relative-attention models may generate longer
    (their clipped distance embeddings keep every lookup in range).
    """


def _padded_length(n: int, block: int) -> int:
    return ((n + block - 1) // block) * block


def sample(
    cfg: ModelConfig,
    weights: ModelWeights,
    prime,
    length: int,
    temperature: float = 1.0,
    seed: int = 0,
    attrs_fn=None,
    collect_trace: bool = False,
    trace_positions=None,
) -> tuple[np.ndarray, AttentionTrace | None]:
    """Generate `length` tokens continuing `prime`.

    Temperature 0 takes the argmax at every step.  The prime is reproduced
    verbatim as the output prefix.  `attrs_fn(tokens) -> (pitches, times)` is
    required when the config enables pitch/time relative logits.
    """
    prime = np.asarray(prime, dtype=np.int64)
    if prime.ndim != 1 or len(prime) < 1:
        raise ValueError("prime must contain at least one token")
    if len(prime) >= length:
        raise ValueError(f"prime length {len(prime)} must be < requested length {length}")
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if length > cfg.max_len and not cfg.use_relative:
        raise SampleLengthError(
            f"length {length} exceeds the trained maximum {cfg.max_len}; absolute-position "
            "models cannot generate beyond it (use a relative-attention model)"
        )

    run_len = length
    if cfg.attention_mode == "local":
        run_len = _padded_length(length, cfg.block_length)
    run_cfg = cfg if run_len <= cfg.max_len else replace(cfg, max_len=run_len)

    rng = np.random.default_rng(seed)
    seq = list(prime)
    while len(seq) < length:
        tokens = np.array(seq, dtype=np.int64)
        t_last = len(tokens) - 1
        if cfg.attention_mode == "local":
            padded = _padded_length(len(tokens), cfg.block_length)
            tokens = np.pad(tokens, (0, padded - len(tokens)))
        attrs = attrs_fn(tokens) if attrs_fn is not None else None
        logits, _ = forward(run_cfg, weights, tokens, token_attributes=attrs)
        row = logits[t_last]
        if temperature == 0.0:
            nxt = int(np.argmax(row))
        else:
            probs = softmax_rows_nd((row / temperature)[None, :])[0]
            nxt = int(rng.choice(cfg.vocab_size, p=probs))
        seq.append(nxt)

    out = np.array(seq, dtype=np.int64)
    trace = None
    if collect_trace:
        tokens = out
        if cfg.attention_mode == "local":
            padded = _padded_length(len(tokens), cfg.block_length)
            tokens = np.pad(tokens, (0, padded - len(tokens)))
        attrs = attrs_fn(tokens) if attrs_fn is not None else None
        _, cache = forward(run_cfg, weights, tokens, token_attributes=attrs)
        positions = trace_positions if trace_positions is not None else list(range(length))
        trace = build_trace(cache, positions)
    return out, trace
