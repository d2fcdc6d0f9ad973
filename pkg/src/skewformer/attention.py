"""Relative self-attention kernels.

The efficient path never materializes the (L, L, D_h) gather tensor: it
multiplies queries against the relative-embedding table directly and then
"skews" the (position, distance)-indexed product into (position, position)
indexing with a pad / reshape / slice sequence.  ``naive_srel_global`` keeps
the quadratic gather around as a correctness and memory-contrast oracle.

All forward kernels return caches holding the intermediates their matching
``*_backward`` functions need.  Gradients accumulate in a fixed order so runs
are bit-for-bit reproducible.
"""

from __future__ import annotations

import math
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .tensor import (
    CAT_REL_EMBED,
    CAT_REL_LOGITS,
    AllocationMeter,
    ShapeError,
    Tensor,
    alloc_category,
)

__all__ = [
    "ConfigurationError",
    "StateError",
    "RelativeEmbeddingTable",
    "LocalAttentionConfig",
    "CausalMask",
    "skew_global",
    "skew_global_backward",
    "skew_local",
    "skew_local_backward",
    "srel_global",
    "naive_srel_global",
    "attention_global",
    "relative_attention_global",
    "relative_attention_global_backward",
    "relative_attention_local",
    "relative_attention_local_backward",
    "AttentionProjections",
    "multi_head_attention",
    "multi_head_attention_backward",
]

GLOBAL = "global"
LOCAL_LEFT = "local_left"


class ConfigurationError(ValueError):
    """Inconsistent attention configuration (modes, divisibility, table sizes)."""


class StateError(RuntimeError):
    """A backward pass was invoked without the forward intermediates it needs."""


# ---------------------------------------------------------------------------
# Domain types


@dataclass
class RelativeEmbeddingTable:
    """Per-head table of relative-distance embeddings.

    Global mode: row r encodes distance r - (num_distances - 1), i.e. rows run
    from the most distant past up to distance 0.  Local-left mode: row r
    encodes distance r - (2N - 1), covering -(2N-1) .. -1 toward the previous
    block.  Distances beyond the covered range clip to the farthest row.
    """

    mode: str
    weights: Tensor  # (num_distances, head_dim)

    def __post_init__(self):
        if self.mode not in (GLOBAL, LOCAL_LEFT):
            raise ConfigurationError(f"unknown table mode {self.mode!r}")
        if self.weights.ndim != 2:
            raise ShapeError(f"table weights must be rank 2, got shape {self.weights.shape}")

    @property
    def num_distances(self) -> int:
        return self.weights.shape[0]

    @property
    def head_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, mode: str, num_distances: int, head_dim: int, dtype=np.float64):
        return cls(mode, tc.zeros((num_distances, head_dim), dtype=dtype))

    def row_index_for_distance(self, distance: int) -> int:
        """Clipped row index for a (non-positive) relative distance."""
        if self.mode == GLOBAL:
            idx = distance + self.num_distances - 1
        else:
            idx = distance + self.num_distances  # distances -(2N-1)..-1
        return int(np.clip(idx, 0, self.num_distances - 1))


@dataclass(frozen=True)
class LocalAttentionConfig:
    """Non-overlapping block attention: each block sees itself and one before."""

    block_length: int
    num_blocks: int

    def __post_init__(self):
        if self.block_length < 1:
            raise ConfigurationError(f"block_length must be >= 1, got {self.block_length}")
        if self.num_blocks < 1:
            raise ConfigurationError(f"num_blocks must be >= 1, got {self.num_blocks}")

    @property
    def total_length(self) -> int:
        return self.block_length * self.num_blocks

    @classmethod
    def for_length(cls, length: int, block_length: int) -> "LocalAttentionConfig":
        if length % block_length != 0:
            raise ConfigurationError(
                f"sequence length {length} is not divisible by block length {block_length}"
            )
        return cls(block_length, length // block_length)


@dataclass(frozen=True)
class CausalMask:
    """Query i may attend keys j <= i."""

    length: int

    def bools(self) -> np.ndarray:
        return np.tril(np.ones((self.length, self.length), dtype=bool))


def _measure(meter: AllocationMeter | None):
    return meter.measure() if meter is not None else nullcontext()


# ---------------------------------------------------------------------------
# Skew transforms (pure data movement)


def _finish_skew_global(padded: Tensor, L: int) -> Tensor:
    stacked = tc.reshape(padded, (L + 1, L))
    return tc.slice_(stacked, ((1, L + 1), (0, L)))


def skew_global(qe: Tensor, meter: AllocationMeter | None = None) -> Tensor:
    """Skew an (i, r)-indexed square matrix into (i, j) indexing.

    Moves entry (i, r) to column j = r - (L-1) + i.  Entries landing at j > i
    are leftovers of the reshape and carry no meaning; downstream masking
    excludes them.  Moved entries are bitwise equal to their sources.
    """
    L = qe.shape[0]
    if qe.ndim != 2 or qe.shape[1] != L:
        raise ShapeError(f"skew_global expects a square matrix, got {qe.shape}")
    with _measure(meter):
        padded = tc.pad(qe, ((0, 0), (1, 0)))  # dummy column before the leftmost
        return _finish_skew_global(padded, L)


def skew_global_backward(d_srel: np.ndarray) -> np.ndarray:
    """Scatter gradients back through skew_global's index map."""
    L = d_srel.shape[0]
    embedded = np.zeros((L + 1, L), dtype=d_srel.dtype)
    embedded[1:, :] = d_srel
    return np.ascontiguousarray(embedded.reshape(L, L + 1)[:, 1:])


def skew_local(qe: Tensor, meter: AllocationMeter | None = None) -> Tensor:
    """Skew an (i, r) block matrix of shape (N, 2N-1) into (N, N) indexing.

    Output entry (i, j) holds the input at column j - i + N - 1, i.e. the logit
    of a current-block query i against key j of the previous block.
    """
    N = qe.shape[0]
    if qe.ndim != 2 or qe.shape[1] != 2 * N - 1:
        raise ShapeError(f"skew_local expects shape (N, 2N-1), got {qe.shape}")
    with _measure(meter):
        padded = tc.pad(qe, ((0, 0), (0, 1)))  # dummy column after the rightmost
        flat = tc.reshape(padded, (2 * N * N,))
        flat = tc.pad(flat, ((0, N - 1),))  # dummy tail row
        stacked = tc.reshape(flat, (N + 1, 2 * N - 1))
        return tc.slice_(stacked, ((0, N), (N - 1, 2 * N - 1)))


def skew_local_backward(d_block: np.ndarray) -> np.ndarray:
    """Scatter gradients back through skew_local's index map."""
    N = d_block.shape[0]
    stacked = np.zeros((N + 1, 2 * N - 1), dtype=d_block.dtype)
    stacked[:N, N - 1 :] = d_block
    flat = stacked.reshape(-1)[: 2 * N * N]
    return np.ascontiguousarray(flat.reshape(N, 2 * N)[:, : 2 * N - 1])


# ---------------------------------------------------------------------------
# Relative logits: efficient path and quadratic oracle


def _clip_column_map(length: int, num_distances: int) -> np.ndarray:
    """Table column for each of the `length` relative-distance slots.

    Slot r of a full-span (i, r) matrix stands for distance r - (length-1);
    distances older than the table covers clip to its farthest row.
    """
    cols = np.arange(length) - length + num_distances
    return np.clip(cols, 0, num_distances - 1)


def _expand_clipped(qe_prod: Tensor, length: int) -> Tensor:
    """Spread an (L, num_distances) product over L distance slots by clipping."""
    num_distances = qe_prod.shape[1]
    if num_distances == length:
        return qe_prod
    if num_distances > length:
        # Table covers more history than the sequence has: keep the newest slots.
        return tc.slice_(qe_prod, ((0, qe_prod.shape[0]), (num_distances - length, num_distances)))
    cols = _clip_column_map(length, num_distances)
    return tc._new(np.ascontiguousarray(qe_prod.array[:, cols]))


def _expand_clipped_backward(d_full: np.ndarray, num_distances: int) -> np.ndarray:
    length = d_full.shape[1]
    if num_distances == length:
        return d_full
    if num_distances > length:
        out = np.zeros((d_full.shape[0], num_distances), dtype=d_full.dtype)
        out[:, num_distances - length :] = d_full
        return out
    cols = _clip_column_map(length, num_distances)
    out = np.zeros((d_full.shape[0], num_distances), dtype=d_full.dtype)
    np.add.at(out, (slice(None), cols), d_full)
    return out


def srel_global(
    q: Tensor, table: RelativeEmbeddingTable, meter: AllocationMeter | None = None
) -> Tensor:
    """Relative logits S^rel for global attention via the skew transform.

    Peak intermediate memory is O(L*D_h + L^2); no (L, L, D_h) tensor exists.
    Only the causal triangle of the result is meaningful.
    """
    if table.mode != GLOBAL:
        raise ConfigurationError(f"srel_global requires a global table, got {table.mode!r}")
    L = q.shape[0]
    with _measure(meter), alloc_category(CAT_REL_LOGITS):
        qe = tc.matmul(q, tc.wrap(table.weights.array.T))  # (L, num_distances)
        qe = _expand_clipped(qe, L)
        padded = tc.pad(qe, ((0, 0), (1, 0)))
        del qe  # release the product; keeps the live set to two (L, L) buffers
        return _finish_skew_global(padded, L)


def srel_global_backward(d_srel: np.ndarray, q: np.ndarray, table: RelativeEmbeddingTable):
    """Gradients (dq, dtable) of srel_global; d_srel must be zero off-triangle."""
    unskewed = skew_global_backward(d_srel)
    d_prod = _expand_clipped_backward(unskewed, table.num_distances)
    dq = tc.mm(d_prod, table.weights.array)
    dtable = tc.mm(d_prod.T, q)
    return dq, dtable


def naive_srel_global(
    q: Tensor, table: RelativeEmbeddingTable, meter: AllocationMeter | None = None
) -> Tensor:
    """Oracle path: gather the full (L, L, D_h) tensor, then contract with Q.

    Intermediate memory is Theta(L^2 * D_h) by construction.  Accumulation over
    the head dimension runs in ascending order, so on the causal triangle the
    result is bitwise equal to the skewed path at matched precision.
    """
    if table.mode != GLOBAL:
        raise ConfigurationError(f"naive_srel_global requires a global table, got {table.mode!r}")
    L, head_dim = q.shape
    with _measure(meter):
        i = np.arange(L)[:, None]
        j = np.arange(L)[None, :]
        rows = np.clip(j - i + table.num_distances - 1, 0, table.num_distances - 1)
        with alloc_category(CAT_REL_EMBED):
            gathered = tc._new(table.weights.array[rows])  # (L, L, D_h)
        with alloc_category(CAT_REL_LOGITS):
            srel = tc.zeros((L, L), dtype=q.dtype)
            out = srel.array
            for d in range(head_dim):
                out += q.array[:, d, None] * gathered.array[:, :, d]
        return srel


# ---------------------------------------------------------------------------
# Global attention (scaled dot-product, optional relative term)


def _apply_attn_dropout(weights: np.ndarray, attn_dropout):
    """Inverted dropout on post-softmax weights; returns (used, keep, rate)."""
    if attn_dropout is None:
        return weights, None, 0.0
    rate, rng = attn_dropout
    if rate <= 0.0:
        return weights, None, 0.0
    keep = rng.random(weights.shape) >= rate
    return weights * keep / (1.0 - rate), keep, rate


def _global_attention_forward(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    table: RelativeEmbeddingTable | None,
    mask: CausalMask | None,
    extra_logits: Tensor | None = None,
    meter: AllocationMeter | None = None,
    attn_dropout=None,
) -> tuple[Tensor, Tensor, dict]:
    L, head_dim = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if table is not None and table.mode != GLOBAL:
        raise ConfigurationError(
            f"global attention requires a global-mode table, got {table.mode!r}"
        )
    with _measure(meter):
        logits = tc.matmul(q, tc.wrap(k.array.T))
        if table is not None:
            logits = tc.add(logits, srel_global(q, table))
        if extra_logits is not None:
            logits = tc.add(logits, extra_logits)
        scaled = tc.divide_scalar(logits, math.sqrt(head_dim))
        mask_bools = mask.bools() if mask is not None else None
        weights = tc.softmax_rows(scaled, mask_bools)
        used, keep, rate = _apply_attn_dropout(weights.array, attn_dropout)
        z = tc.matmul(tc.wrap(used), v)
    cache = {
        "kind": "global",
        "q": q.array,
        "k": k.array,
        "v": v.array,
        "table": table,
        "weights": weights.array,
        "weights_used": used,
        "drop_keep": keep,
        "drop_rate": rate,
        "mask": mask_bools,
        "has_extra": extra_logits is not None,
        "head_dim": head_dim,
    }
    return z, weights, cache


def attention_global(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: CausalMask | None = None,
    meter: AllocationMeter | None = None,
) -> tuple[Tensor, Tensor]:
    """Plain scaled dot-product attention: softmax(QK^T / sqrt(D_h)) V."""
    z, weights, _ = _global_attention_forward(q, k, v, None, mask, meter=meter)
    return z, weights


def relative_attention_global(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    table: RelativeEmbeddingTable,
    mask: CausalMask | None = None,
    meter: AllocationMeter | None = None,
    extra_logits: Tensor | None = None,
    return_cache: bool = False,
):
    """Relative attention: softmax((QK^T + S^rel) / sqrt(D_h)) V.

    Returns (z, weights); with `return_cache` also the intermediates needed by
    :func:`relative_attention_global_backward`.
    """
    z, weights, cache = _global_attention_forward(
        q, k, v, table, mask, extra_logits=extra_logits, meter=meter
    )
    if return_cache:
        return z, weights, cache
    return z, weights


def _softmax_backward(weights: np.ndarray, d_weights: np.ndarray) -> np.ndarray:
    inner = np.sum(d_weights * weights, axis=-1, keepdims=True)
    return weights * (d_weights - inner)


def relative_attention_global_backward(cache: dict | None, dz: np.ndarray):
    """Exact reverse-mode gradients for the global kernel.

    Returns a dict with dq, dk, dv, and (when the forward had them) dtable and
    d_extra_logits.
    """
    if not cache or cache.get("kind") != "global":
        raise StateError("global attention backward requires the forward cache")
    q, k, v = cache["q"], cache["k"], cache["v"]
    weights = cache["weights"]
    table: RelativeEmbeddingTable | None = cache["table"]
    scale = math.sqrt(cache["head_dim"])

    d_weights = tc.mm(dz, np.ascontiguousarray(v.T))
    dv = tc.mm(np.ascontiguousarray(cache["weights_used"].T), dz)
    if cache["drop_keep"] is not None:
        d_weights = d_weights * cache["drop_keep"] / (1.0 - cache["drop_rate"])
    d_scaled = _softmax_backward(weights, d_weights)
    if cache["mask"] is not None:
        d_scaled = np.where(cache["mask"], d_scaled, 0.0)
    d_logits = d_scaled / scale

    dq = tc.mm(d_logits, k)
    dk = tc.mm(np.ascontiguousarray(d_logits.T), q)
    grads = {"dq": dq, "dk": dk, "dv": dv}
    if table is not None:
        dq_rel, dtable = srel_global_backward(d_logits, q, table)
        grads["dq"] = dq + dq_rel
        grads["dtable"] = dtable
    if cache["has_extra"]:
        grads["d_extra_logits"] = d_logits
    return grads


# ---------------------------------------------------------------------------
# Blocked local attention


def _local_tables_ok(table_left: RelativeEmbeddingTable, table_right: RelativeEmbeddingTable, N: int):
    if table_left.mode != LOCAL_LEFT:
        raise ConfigurationError(f"left table must be local_left, got {table_left.mode!r}")
    if table_right.mode != GLOBAL:
        raise ConfigurationError(f"right table must be global, got {table_right.mode!r}")
    if table_left.num_distances != 2 * N - 1:
        raise ConfigurationError(
            f"left table covers {table_left.num_distances} distances, expected {2 * N - 1}"
        )
    if table_right.num_distances > N:
        raise ConfigurationError(
            f"right table covers {table_right.num_distances} distances for block length {N}"
        )


def relative_attention_local(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    table_left: RelativeEmbeddingTable | None,
    table_right: RelativeEmbeddingTable | None,
    cfg: LocalAttentionConfig,
    meter: AllocationMeter | None = None,
    return_cache: bool = False,
    attn_dropout=None,
):
    """Blocked relative attention: each block attends to itself (causally) and
    the previous block (fully), softmax taken jointly over the 2N-key span.

    Tables may both be None for the plain (non-relative) local variant.
    Returns (z, per-block weights): block 0 weights are (N, N), later blocks
    (N, 2N) with the previous block's keys first.
    """
    N, M = cfg.block_length, cfg.num_blocks
    L, head_dim = q.shape
    if L != cfg.total_length:
        raise ConfigurationError(f"sequence length {L} != {M} blocks of {N}")
    if (table_left is None) != (table_right is None):
        raise ConfigurationError("local attention needs both tables or neither")
    if table_left is not None:
        _local_tables_ok(table_left, table_right, N)
    scale = math.sqrt(head_dim)
    causal = CausalMask(N).bools()

    z_parts: list[np.ndarray] = []
    block_weights: list[Tensor] = []
    block_caches: list[dict] = []
    with _measure(meter):
        for b in range(M):
            lo, hi = b * N, (b + 1) * N
            qb = tc.slice_(q, ((lo, hi), (0, head_dim)))
            kb = tc.slice_(k, ((lo, hi), (0, head_dim)))
            vb = tc.slice_(v, ((lo, hi), (0, head_dim)))
            right = tc.matmul(qb, tc.wrap(kb.array.T))
            if table_right is not None:
                right = tc.add(right, srel_global(qb, table_right))
            if b == 0:
                span_logits = right
                span_mask = causal
                vspan = vb.array
            else:
                kp = tc.slice_(k, ((lo - N, lo), (0, head_dim)))
                left = tc.matmul(qb, tc.wrap(kp.array.T))
                if table_left is not None:
                    with alloc_category(CAT_REL_LOGITS):
                        qe = tc.matmul(qb, tc.wrap(table_left.weights.array.T))
                        left = tc.add(left, skew_local(qe))
                span_logits = tc._new(np.concatenate([left.array, right.array], axis=1))
                span_mask = np.concatenate([np.ones((N, N), dtype=bool), causal], axis=1)
                vspan = np.concatenate([v.array[lo - N : lo], vb.array])
            scaled = tc.divide_scalar(span_logits, scale)
            weights = tc.softmax_rows(scaled, span_mask)
            used, keep, rate = _apply_attn_dropout(weights.array, attn_dropout)
            zb = tc.matmul(tc.wrap(used), tc.wrap(vspan))
            z_parts.append(zb.array)
            block_weights.append(weights)
            block_caches.append(
                {
                    "qb": qb.array,
                    "kb": kb.array,
                    "vspan": vspan,
                    "weights": weights.array,
                    "weights_used": used,
                    "drop_keep": keep,
                    "drop_rate": rate,
                    "mask": span_mask,
                }
            )
        z = tc._new(np.concatenate(z_parts, axis=0))
    cache = {
        "kind": "local",
        "cfg": cfg,
        "q": q.array,
        "k": k.array,
        "v": v.array,
        "table_left": table_left,
        "table_right": table_right,
        "blocks": block_caches,
        "head_dim": head_dim,
    }
    if return_cache:
        return z, block_weights, cache
    return z, block_weights


def relative_attention_local_backward(cache: dict | None, dz: np.ndarray):
    """Exact reverse-mode gradients for the blocked local kernel."""
    if not cache or cache.get("kind") != "local":
        raise StateError("local attention backward requires the forward cache")
    cfg: LocalAttentionConfig = cache["cfg"]
    N, M = cfg.block_length, cfg.num_blocks
    q, k, v = cache["q"], cache["k"], cache["v"]
    table_left: RelativeEmbeddingTable | None = cache["table_left"]
    table_right: RelativeEmbeddingTable | None = cache["table_right"]
    scale = math.sqrt(cache["head_dim"])

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    dtable_left = None if table_left is None else np.zeros_like(table_left.weights.array)
    dtable_right = None if table_right is None else np.zeros_like(table_right.weights.array)

    for b in range(M):
        lo, hi = b * N, (b + 1) * N
        blk = cache["blocks"][b]
        weights = blk["weights"]
        dzb = dz[lo:hi]

        d_weights = tc.mm(dzb, np.ascontiguousarray(blk["vspan"].T))
        dvspan = tc.mm(np.ascontiguousarray(blk["weights_used"].T), dzb)
        if blk["drop_keep"] is not None:
            d_weights = d_weights * blk["drop_keep"] / (1.0 - blk["drop_rate"])
        d_scaled = _softmax_backward(weights, d_weights)
        d_scaled = np.where(blk["mask"], d_scaled, 0.0)
        d_logits = d_scaled / scale

        if b == 0:
            d_right = d_logits
            dv[lo:hi] += dvspan
        else:
            d_left, d_right = d_logits[:, :N], d_logits[:, N:]
            dv[lo - N : lo] += dvspan[:N]
            dv[lo:hi] += dvspan[N:]
            dq[lo:hi] += tc.mm(np.ascontiguousarray(d_left), k[lo - N : lo])
            dk[lo - N : lo] += tc.mm(np.ascontiguousarray(d_left.T), blk["qb"])
            if table_left is not None:
                d_qe = skew_local_backward(np.ascontiguousarray(d_left))
                dq[lo:hi] += tc.mm(d_qe, table_left.weights.array)
                dtable_left += tc.mm(np.ascontiguousarray(d_qe.T), blk["qb"])
        d_right = np.ascontiguousarray(d_right)
        dq[lo:hi] += tc.mm(d_right, blk["kb"])
        dk[lo:hi] += tc.mm(np.ascontiguousarray(d_right.T), blk["qb"])
        if table_right is not None:
            dq_rel, dt = srel_global_backward(d_right, blk["qb"], table_right)
            dq[lo:hi] += dq_rel
            dtable_right += dt

    grads = {"dq": dq, "dk": dk, "dv": dv}
    if table_left is not None:
        grads["dtable_left"] = dtable_left
        grads["dtable_right"] = dtable_right
    return grads


# ---------------------------------------------------------------------------
# Multi-head assembly


@dataclass
class AttentionProjections:
    """The four square projection matrices of one attention sub-layer."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


@dataclass
class HeadTables:
    """Per-head relative tables; right/left pair in local mode."""

    global_table: RelativeEmbeddingTable | None = None
    left: RelativeEmbeddingTable | None = None
    right: RelativeEmbeddingTable | None = None


def multi_head_attention(
    x: Tensor,
    proj: AttentionProjections,
    heads: int,
    tables: list[HeadTables] | None = None,
    mode: str = "global",
    local_cfg: LocalAttentionConfig | None = None,
    mask: CausalMask | None = None,
    extra_provider=None,
    attn_dropout=None,
    meter: AllocationMeter | None = None,
    return_cache: bool = False,
):
    """Project, split into heads, run (relative) attention, concat, project.

    `tables` is one entry per head (None for absolute attention).  In global
    mode an `extra_provider` may contribute additional per-head logits computed
    from the projected query; it must expose ``forward(h, q) -> (logits, cache)``
    and ``backward(cache, d_logits) -> dq``.  Returns (y, per-head weights) and
    optionally the backward cache.
    """
    L, depth = x.shape
    if depth % heads != 0:
        raise ConfigurationError(f"depth {depth} not divisible by {heads} heads")
    if mode not in ("global", "local"):
        raise ConfigurationError(f"unknown attention mode {mode!r}")
    if mode == "local" and local_cfg is None:
        raise ConfigurationError("local mode requires a LocalAttentionConfig")
    if mode == "local" and extra_provider is not None:
        raise ConfigurationError("extra logits are only supported in global mode")
    if tables is not None and len(tables) != heads:
        raise ConfigurationError(f"{len(tables)} table entries for {heads} heads")
    head_dim = depth // heads

    with _measure(meter):
        qf = tc.mm(x.array, proj.wq)
        kf = tc.mm(x.array, proj.wk)
        vf = tc.mm(x.array, proj.wv)

        head_outputs = []
        head_weights = []
        head_caches = []
        extra_caches = []
        for h in range(heads):
            sl = slice(h * head_dim, (h + 1) * head_dim)
            q = tc.wrap(np.ascontiguousarray(qf[:, sl]))
            k = tc.wrap(np.ascontiguousarray(kf[:, sl]))
            v = tc.wrap(np.ascontiguousarray(vf[:, sl]))
            ht = tables[h] if tables is not None else HeadTables()
            if mode == "global":
                extra = None
                if extra_provider is not None:
                    e_logits, e_cache = extra_provider.forward(h, q.array)
                    extra = tc.wrap(e_logits)
                    extra_caches.append(e_cache)
                z, w, hc = _global_attention_forward(
                    q,
                    k,
                    v,
                    ht.global_table,
                    mask or CausalMask(L),
                    extra_logits=extra,
                    attn_dropout=attn_dropout,
                )
            else:
                z, w, hc = relative_attention_local(
                    q,
                    k,
                    v,
                    ht.left,
                    ht.right,
                    local_cfg,
                    return_cache=True,
                    attn_dropout=attn_dropout,
                )
            head_outputs.append(z.array)
            head_weights.append(w)
            head_caches.append(hc)
        concat = np.concatenate(head_outputs, axis=1)
        y = tc.wrap(tc.mm(concat, proj.wo))

    cache = {
        "kind": "mha",
        "x": x.array,
        "proj": proj,
        "heads": heads,
        "head_dim": head_dim,
        "mode": mode,
        "concat": concat,
        "head_caches": head_caches,
        "extra_provider": extra_provider,
        "extra_caches": extra_caches,
    }
    if return_cache:
        return y, head_weights, cache
    return y, head_weights


def multi_head_attention_backward(cache: dict | None, dy: np.ndarray):
    """Gradients for x, the four projections, all head tables, extra logits."""
    if not cache or cache.get("kind") != "mha":
        raise StateError("multi-head backward requires the forward cache")
    x = cache["x"]
    proj: AttentionProjections = cache["proj"]
    heads, head_dim = cache["heads"], cache["head_dim"]

    d_concat = tc.mm(dy, np.ascontiguousarray(proj.wo.T))
    dwo = tc.mm(np.ascontiguousarray(cache["concat"].T), dy)

    dqf = np.zeros_like(x[:, : heads * head_dim])
    dkf = np.zeros_like(dqf)
    dvf = np.zeros_like(dqf)
    table_grads = []
    provider = cache["extra_provider"]
    for h in range(heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        hc = cache["head_caches"][h]
        dzh = np.ascontiguousarray(d_concat[:, sl])
        if cache["mode"] == "global":
            g = relative_attention_global_backward(hc, dzh)
            table_grads.append({"dtable": g.get("dtable")})
        else:
            g = relative_attention_local_backward(hc, dzh)
            table_grads.append(
                {"dtable_left": g.get("dtable_left"), "dtable_right": g.get("dtable_right")}
            )
        dqf[:, sl] = g["dq"]
        dkf[:, sl] = g["dk"]
        dvf[:, sl] = g["dv"]
        if provider is not None and "d_extra_logits" in g:
            dqf[:, sl] += provider.backward(cache["extra_caches"][h], g["d_extra_logits"])

    dx = tc.mm(dqf, np.ascontiguousarray(proj.wq.T))
    dx += tc.mm(dkf, np.ascontiguousarray(proj.wk.T))
    dx += tc.mm(dvf, np.ascontiguousarray(proj.wv.T))
    xt = np.ascontiguousarray(x.T)
    return {
        "dx": dx,
        "dwq": tc.mm(xt, dqf),
        "dwk": tc.mm(xt, dkf),
        "dwv": tc.mm(xt, dvf),
        "dwo": dwo,
        "tables": table_grads,
    }
