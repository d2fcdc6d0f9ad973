"""Autoregressive Transformer decoder built on the relative-attention kernels.

The model is trained with hand-written reverse-mode gradients: every forward
helper returns a cache consumed by its backward counterpart.  Weights live in
a flat name -> ndarray mapping whose shapes are dictated by the config, which
keeps checkpointing, gradient bookkeeping, and parameter counting trivial.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as tc
from .attention import (
    AttentionProjections,
    CausalMask,
    ConfigurationError,
    HeadTables,
    LocalAttentionConfig,
    RelativeEmbeddingTable,
    multi_head_attention,
    multi_head_attention_backward,
)

__all__ = [
    "ModelConfig",
    "ModelWeights",
    "CheckpointError",
    "AttentionTrace",
    "positional_signal",
    "sinusoid_bank",
    "feedforward",
    "pitch_time_relative_logits",
    "forward",
    "backward",
    "cross_entropy",
    "sequence_nll",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT_VERSION = 1
LN_EPS = 1e-6
NUM_VOICES = 4  # four-part chorale grids

POSITION_MODES = ("add_sinusoid", "concat_sinusoid", "concat_sinusoid_and_instrument")


class CheckpointError(RuntimeError):
    """Checkpoint file is missing, unversioned, or incompatible with the config."""


@dataclass
class ModelConfig:
    """Hyperparameters; every weight shape is a function of these fields."""

    vocab_size: int
    max_len: int = 128
    depth: int = 128
    heads: int = 4
    layers: int = 3
    feedforward_size: int = 512
    attention_mode: str = "global"  # "global" | "local"
    block_length: int = 64  # local mode only
    position_mode: str = "add_sinusoid"
    sinusoid_channels: int = 32  # concat modes only
    use_relative: bool = True
    relative_max_distance: int | None = None  # None: half of max_len
    use_pitch_time_relative: bool = False
    pitch_max_interval: int = 64
    time_max_distance: int = 32
    pitch_time_gather_cap: int = 1024
    dropout: float = 0.1
    norm_placement: str = "pre"  # "pre" | "post"
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigurationError("vocab_size must be >= 1")
        if self.depth % self.heads != 0:
            raise ConfigurationError(
                f"depth {self.depth} not divisible by {self.heads} heads"
            )
        if self.attention_mode not in ("global", "local"):
            raise ConfigurationError(f"unknown attention_mode {self.attention_mode!r}")
        if self.attention_mode == "local" and self.max_len % self.block_length != 0:
            raise ConfigurationError(
                f"max_len {self.max_len} not divisible by block_length {self.block_length}"
            )
        if self.position_mode not in POSITION_MODES:
            raise ConfigurationError(f"unknown position_mode {self.position_mode!r}")
        if self.norm_placement not in ("pre", "post"):
            raise ConfigurationError(f"unknown norm_placement {self.norm_placement!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.embedding_width < 1:
            raise ConfigurationError(
                f"position channels leave no room for the token embedding "
                f"(depth {self.depth}, sinusoid {self.sinusoid_channels})"
            )
        if self.use_pitch_time_relative and self.attention_mode != "global":
            raise ConfigurationError("pitch/time relative logits require global attention")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.depth // self.heads

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def rel_distance(self) -> int:
        """Maximum relative distance represented exactly (global mode)."""
        if self.relative_max_distance is not None:
            return self.relative_max_distance
        return max(1, self.max_len // 2)

    @property
    def embedding_width(self) -> int:
        if self.position_mode == "add_sinusoid":
            return self.depth
        width = self.depth - self.sinusoid_channels
        if self.position_mode == "concat_sinusoid_and_instrument":
            width -= NUM_VOICES
        return width

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown config fields: {sorted(extra)}")
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable slot and its shape, in a fixed order."""
    D, F, V = cfg.depth, cfg.feedforward_size, cfg.vocab_size
    Dh = cfg.head_dim
    shapes: dict[str, tuple[int, ...]] = {"token_embedding": (V, cfg.embedding_width)}
    for i in range(cfg.layers):
        p = f"layer{i}."
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + w] = (D, D)
        if cfg.use_relative:
            for h in range(cfg.heads):
                if cfg.attention_mode == "global":
                    shapes[f"{p}head{h}.rel"] = (cfg.rel_distance + 1, Dh)
                else:
                    N = cfg.block_length
                    shapes[f"{p}head{h}.rel_left"] = (2 * N - 1, Dh)
                    shapes[f"{p}head{h}.rel_right"] = (N, Dh)
        shapes[p + "norm1.scale"] = (D,)
        shapes[p + "norm1.offset"] = (D,)
        shapes[p + "norm2.scale"] = (D,)
        shapes[p + "norm2.offset"] = (D,)
        shapes[p + "ff.w1"] = (D, F)
        shapes[p + "ff.b1"] = (F,)
        shapes[p + "ff.w2"] = (F, D)
        shapes[p + "ff.b2"] = (D,)
    if cfg.use_pitch_time_relative:
        shapes["pitch_table"] = (2 * cfg.pitch_max_interval + 2, Dh)
        shapes["time_table"] = (cfg.time_max_distance + 1, Dh)
    if cfg.norm_placement == "pre":
        shapes["final_norm.scale"] = (D,)
        shapes["final_norm.offset"] = (D,)
    shapes["output.w"] = (D, V)
    shapes["output.b"] = (V,)
    return shapes


@dataclass
class ModelWeights:
    """Named parameter tensors; shapes always match :func:`param_shapes`."""

    params: dict[str, np.ndarray]

    @classmethod
    def initialize(cls, cfg: ModelConfig, rng: np.random.Generator | None = None) -> "ModelWeights":
        """Scaled uniform fan-in init for matrices, small uniform noise for
        embedding tables, ones/zeros for norms and biases."""
        rng = rng or np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        params: dict[str, np.ndarray] = {}
        for name, shape in param_shapes(cfg).items():
            if name.endswith((".scale",)):
                params[name] = np.ones(shape, dtype=dt)
            elif name.endswith((".offset", ".b1", ".b2", "output.b")):
                params[name] = np.zeros(shape, dtype=dt)
            elif (
                name == "token_embedding"
                or ".rel" in name
                or name in ("pitch_table", "time_table")
            ):
                params[name] = rng.uniform(-0.05, 0.05, size=shape).astype(dt)
            else:
                limit = math.sqrt(3.0 / shape[0])
                params[name] = rng.uniform(-limit, limit, size=shape).astype(dt)
        return cls(params)

    def validate_against(self, cfg: ModelConfig):
        expected = param_shapes(cfg)
        if set(self.params) != set(expected):
            missing = sorted(set(expected) - set(self.params))
            surplus = sorted(set(self.params) - set(expected))
            raise CheckpointError(
                f"weight names do not match config (missing {missing}, surplus {surplus})"
            )
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise CheckpointError(
                    f"{name}: shape {self.params[name].shape} != expected {shape}"
                )

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


# ---------------------------------------------------------------------------
# Positional signals


def sinusoid_bank(positions: np.ndarray, width: int, dtype=np.float64) -> np.ndarray:
    """Interleaved sin/cos bank with geometrically spaced wavelengths.

    Even channels carry sin, odd carry cos, so position 0 maps to 0s and 1s.
    Works for arbitrary positions; nothing is tabulated ahead of time.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n_sin = (width + 1) // 2
    n_cos = width // 2
    exponents = 2.0 * np.arange(max(n_sin, n_cos)) / max(width, 1)
    inv_wavelength = 1.0 / np.power(10000.0, exponents)
    angles = positions[:, None] * inv_wavelength[None, :]
    out = np.zeros((len(positions), width), dtype=dtype)
    out[:, 0::2] = np.sin(angles[:, :n_sin])
    out[:, 1::2] = np.cos(angles[:, :n_cos])
    return out


def positional_signal(
    cfg: ModelConfig,
    positions: np.ndarray,
    instrument_labels: np.ndarray | None = None,
) -> np.ndarray:
    """Position information as a (T, depth) array.

    Add mode fills all channels with sinusoids.  Concat modes zero the
    embedding channels and place sinusoids (and a voice one-hot) in their
    reserved channels, so adding the result to a channel-padded embedding
    realizes the concatenation.
    """
    positions = np.asarray(positions)
    dt = cfg.np_dtype
    if cfg.position_mode == "add_sinusoid":
        return sinusoid_bank(positions, cfg.depth, dtype=dt)
    out = np.zeros((len(positions), cfg.depth), dtype=dt)
    lo = cfg.embedding_width
    out[:, lo : lo + cfg.sinusoid_channels] = sinusoid_bank(
        positions, cfg.sinusoid_channels, dtype=dt
    )
    if cfg.position_mode == "concat_sinusoid_and_instrument":
        if instrument_labels is None:
            instrument_labels = positions % NUM_VOICES
        labels = np.asarray(instrument_labels)
        if labels.shape != positions.shape:
            raise ConfigurationError("instrument labels must align with positions")
        if labels.min() < 0 or labels.max() >= NUM_VOICES:
            raise ConfigurationError(f"instrument labels must be in [0, {NUM_VOICES})")
        out[np.arange(len(positions)), lo + cfg.sinusoid_channels + labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# Feedforward and layer norm


def feedforward(z, w1, b1, w2, b2, dropout=None):
    """Position-wise ReLU(z W1 + b1) W2 + b2; returns (out, cache)."""
    pre = tc.mm(z, w1) + b1
    hidden = np.maximum(pre, 0.0)
    keep = None
    rate = 0.0
    if dropout is not None:
        rate, rng = dropout
        if rate > 0.0:
            keep = rng.random(hidden.shape) >= rate
            hidden = hidden * keep / (1.0 - rate)
    out = tc.mm(hidden, w2) + b2
    return out, {"z": z, "pre": pre, "hidden": hidden, "keep": keep, "rate": rate, "w1": w1, "w2": w2}


def feedforward_backward(cache, dout):
    dh = tc.mm(dout, np.ascontiguousarray(cache["w2"].T))
    dw2 = tc.mm(np.ascontiguousarray(cache["hidden"].T), dout)
    db2 = dout.sum(axis=0)
    if cache["keep"] is not None:
        dh = dh * cache["keep"] / (1.0 - cache["rate"])
    dpre = dh * (cache["pre"] > 0.0)
    dw1 = tc.mm(np.ascontiguousarray(cache["z"].T), dpre)
    db1 = dpre.sum(axis=0)
    dz = tc.mm(dpre, np.ascontiguousarray(cache["w1"].T))
    return dz, dw1, db1, dw2, db2


def layer_norm(x, scale, offset):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = centered * inv_std
    return xhat * scale + offset, {"xhat": xhat, "inv_std": inv_std, "scale": scale}


def layer_norm_backward(cache, dy):
    xhat, inv_std, scale = cache["xhat"], cache["inv_std"], cache["scale"]
    dscale = (dy * xhat).sum(axis=0)
    doffset = dy.sum(axis=0)
    dxhat = dy * scale
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dscale, doffset


# ---------------------------------------------------------------------------
# Pitch/time relative logits (first layer only)


def pitch_time_relative_logits(
    q: np.ndarray,
    token_pitches: np.ndarray,
    token_times: np.ndarray,
    time_table: np.ndarray,
    pitch_table: np.ndarray,
    gather_cap: int = 1024,
):
    """Content-based relative logits Q (R^t + R^p) via an explicit gather.

    The gather materializes an (L, L, D_h) tensor, so sequence length is
    capped; disable the feature (use_pitch_time_relative=False) for longer
    sequences.  Pitch row layout: interval -pmax..pmax, then one trailing
    no-interval row used whenever either token is unpitched (pitch < 0).
    Time rows cover step differences -(rows-1)..0; older differences clip.

    Returns (logits, cache) where logits is (L, L).
    """
    L = q.shape[0]
    if L > gather_cap:
        raise ConfigurationError(
            f"sequence length {L} exceeds the pitch/time gather cap {gather_cap}; "
            "disable use_pitch_time_relative for long sequences"
        )
    pitches = np.asarray(token_pitches)
    times = np.asarray(token_times)
    if pitches.shape != (L,) or times.shape != (L,):
        raise ConfigurationError("token pitches/times must align with the sequence")

    t_rows = time_table.shape[0]
    t_idx = np.clip(times[None, :] - times[:, None] + t_rows - 1, 0, t_rows - 1)

    p_rows = pitch_table.shape[0]
    pmax = (p_rows - 2) // 2
    unpitched = (pitches[:, None] < 0) | (pitches[None, :] < 0)
    interval = np.clip(pitches[None, :] - pitches[:, None], -pmax, pmax) + pmax
    p_idx = np.where(unpitched, p_rows - 1, interval)

    gathered = time_table[t_idx] + pitch_table[p_idx]  # (L, L, D_h)
    logits = np.einsum("id,ijd->ij", q, gathered)
    cache = {
        "q": q,
        "gathered": gathered,
        "t_idx": t_idx,
        "p_idx": p_idx,
        "t_shape": time_table.shape,
        "p_shape": pitch_table.shape,
    }
    return logits, cache


def pitch_time_relative_logits_backward(cache, d_logits):
    """Returns (dq, d_time_table, d_pitch_table)."""
    dq = np.einsum("ij,ijd->id", d_logits, cache["gathered"])
    d_gathered = cache["q"][:, None, :] * d_logits[:, :, None]
    dt = np.zeros(cache["t_shape"], dtype=d_logits.dtype)
    np.add.at(dt, cache["t_idx"], d_gathered)
    dp = np.zeros(cache["p_shape"], dtype=d_logits.dtype)
    np.add.at(dp, cache["p_idx"], d_gathered)
    return dq, dt, dp


class _PitchTimeProvider:
    """Adapts the pitch/time gather to the multi-head extra-logits hook.

    Tables are shared across the first layer's heads; gradient contributions
    accumulate here in ascending head order.
    """

    def __init__(self, pitches, times, time_table, pitch_table, gather_cap):
        self.pitches = pitches
        self.times = times
        self.time_table = time_table
        self.pitch_table = pitch_table
        self.gather_cap = gather_cap
        self.d_time = np.zeros_like(time_table)
        self.d_pitch = np.zeros_like(pitch_table)

    def forward(self, h, q):
        return pitch_time_relative_logits(
            q, self.pitches, self.times, self.time_table, self.pitch_table, self.gather_cap
        )

    def backward(self, cache, d_logits):
        dq, dt, dp = pitch_time_relative_logits_backward(cache, d_logits)
        self.d_time += dt
        self.d_pitch += dp
        return dq


# ---------------------------------------------------------------------------
# Full decoder forward / backward


def _layer_tables(cfg: ModelConfig, weights: ModelWeights, i: int) -> list[HeadTables] | None:
    if not cfg.use_relative:
        return None
    tables = []
    for h in range(cfg.heads):
        if cfg.attention_mode == "global":
            t = RelativeEmbeddingTable(
                "global", tc.wrap(weights.params[f"layer{i}.head{h}.rel"])
            )
            tables.append(HeadTables(global_table=t))
        else:
            left = RelativeEmbeddingTable(
                "local_left", tc.wrap(weights.params[f"layer{i}.head{h}.rel_left"])
            )
            right = RelativeEmbeddingTable(
                "global", tc.wrap(weights.params[f"layer{i}.head{h}.rel_right"])
            )
            tables.append(HeadTables(left=left, right=right))
    return tables


def forward(
    cfg: ModelConfig,
    weights: ModelWeights,
    tokens,
    token_attributes=None,
    dropout_rng: np.random.Generator | None = None,
    max_len: int | None = None,
):
    """Run the decoder; returns (logits, cache).

    `token_attributes` is a (pitches, times) pair required when the config
    enables pitch/time relative logits.  `dropout_rng` enables training-mode
    dropout; evaluation passes None.  `max_len` overrides the configured
    length limit (used for deliberate beyond-training-length evaluation).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    T = len(tokens)
    limit = cfg.max_len if max_len is None else max_len
    if T > limit:
        raise ConfigurationError(f"sequence length {T} exceeds the model limit {limit}")
    if T < 1:
        raise ConfigurationError("empty token sequence")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ConfigurationError(f"token ids must be in [0, {cfg.vocab_size})")
    if cfg.attention_mode == "local" and T % cfg.block_length != 0:
        raise ConfigurationError(
            f"local attention needs lengths divisible by {cfg.block_length}, got {T}"
        )

    dt = cfg.np_dtype
    positions = np.arange(T)
    emb = weights.params["token_embedding"][tokens]
    emb_scale = math.sqrt(cfg.depth) if cfg.position_mode == "add_sinusoid" else 1.0
    x = np.zeros((T, cfg.depth), dtype=dt)
    x[:, : cfg.embedding_width] = emb * emb_scale
    x = x + positional_signal(cfg, positions)

    provider = None
    if cfg.use_pitch_time_relative:
        if token_attributes is None:
            raise ConfigurationError(
                "use_pitch_time_relative requires (pitches, times) token attributes"
            )
        pitches, times = token_attributes
        provider = _PitchTimeProvider(
            np.asarray(pitches),
            np.asarray(times),
            weights.params["time_table"],
            weights.params["pitch_table"],
            cfg.pitch_time_gather_cap,
        )

    local_cfg = None
    if cfg.attention_mode == "local":
        local_cfg = LocalAttentionConfig.for_length(T, cfg.block_length)
    mask = CausalMask(T)
    dropout = None
    if dropout_rng is not None and cfg.dropout > 0.0:
        dropout = (cfg.dropout, dropout_rng)

    layer_caches = []
    head_weights_per_layer = []
    for i in range(cfg.layers):
        p = weights.params
        proj = AttentionProjections(
            p[f"layer{i}.wq"], p[f"layer{i}.wk"], p[f"layer{i}.wv"], p[f"layer{i}.wo"]
        )
        tables = _layer_tables(cfg, weights, i)
        extra = provider if i == 0 else None
        lc: dict = {"proj": proj}

        if cfg.norm_placement == "pre":
            normed, lc["ln1"] = layer_norm(
                x, p[f"layer{i}.norm1.scale"], p[f"layer{i}.norm1.offset"]
            )
            y, hw, lc["mha"] = multi_head_attention(
                tc.wrap(np.ascontiguousarray(normed)),
                proj,
                cfg.heads,
                tables,
                mode=cfg.attention_mode,
                local_cfg=local_cfg,
                mask=mask,
                extra_provider=extra,
                attn_dropout=dropout,
                return_cache=True,
            )
            x = x + y.array
            normed2, lc["ln2"] = layer_norm(
                x, p[f"layer{i}.norm2.scale"], p[f"layer{i}.norm2.offset"]
            )
            ff_out, lc["ff"] = feedforward(
                normed2,
                p[f"layer{i}.ff.w1"],
                p[f"layer{i}.ff.b1"],
                p[f"layer{i}.ff.w2"],
                p[f"layer{i}.ff.b2"],
                dropout=dropout,
            )
            x = x + ff_out
        else:
            y, hw, lc["mha"] = multi_head_attention(
                tc.wrap(np.ascontiguousarray(x)),
                proj,
                cfg.heads,
                tables,
                mode=cfg.attention_mode,
                local_cfg=local_cfg,
                mask=mask,
                extra_provider=extra,
                attn_dropout=dropout,
                return_cache=True,
            )
            x, lc["ln1"] = layer_norm(
                x + y.array, p[f"layer{i}.norm1.scale"], p[f"layer{i}.norm1.offset"]
            )
            ff_out, lc["ff"] = feedforward(
                x,
                p[f"layer{i}.ff.w1"],
                p[f"layer{i}.ff.b1"],
                p[f"layer{i}.ff.w2"],
                p[f"layer{i}.ff.b2"],
                dropout=dropout,
            )
            x, lc["ln2"] = layer_norm(
                x + ff_out, p[f"layer{i}.norm2.scale"], p[f"layer{i}.norm2.offset"]
            )
        layer_caches.append(lc)
        head_weights_per_layer.append(hw)

    if cfg.norm_placement == "pre":
        x, final_ln_cache = layer_norm(
            x, weights.params["final_norm.scale"], weights.params["final_norm.offset"]
        )
    else:
        final_ln_cache = None
    logits = tc.mm(x, weights.params["output.w"]) + weights.params["output.b"]

    cache = {
        "cfg": cfg,
        "tokens": tokens,
        "emb_scale": emb_scale,
        "layers": layer_caches,
        "head_weights": head_weights_per_layer,
        "final_ln": final_ln_cache,
        "final_x": x,
        "provider": provider,
        "local_cfg": local_cfg,
    }
    return logits, cache


def backward(cache: dict, d_logits: np.ndarray, weights: ModelWeights) -> dict[str, np.ndarray]:
    """Gradients of every named parameter given d(loss)/d(logits)."""
    cfg: ModelConfig = cache["cfg"]
    p = weights.params
    grads = weights.zeros_like()

    x = cache["final_x"]
    grads["output.w"] = tc.mm(np.ascontiguousarray(x.T), d_logits)
    grads["output.b"] = d_logits.sum(axis=0)
    dx = tc.mm(d_logits, np.ascontiguousarray(p["output.w"].T))
    if cfg.norm_placement == "pre":
        dx, grads["final_norm.scale"], grads["final_norm.offset"] = layer_norm_backward(
            cache["final_ln"], dx
        )

    for i in reversed(range(cfg.layers)):
        lc = cache["layers"][i]
        if cfg.norm_placement == "pre":
            dff = dx
            dnormed2, dw1, db1, dw2, db2 = feedforward_backward(lc["ff"], dff)
            dres, dscale2, doffset2 = layer_norm_backward(lc["ln2"], dnormed2)
            dx = dx + dres
            dmha = dx
            g = multi_head_attention_backward(lc["mha"], dmha)
            dnormed, dscale1, doffset1 = layer_norm_backward(lc["ln1"], g["dx"])
            dx = dx + dnormed
        else:
            dsum2, dscale2, doffset2 = layer_norm_backward(lc["ln2"], dx)
            dnormed2, dw1, db1, dw2, db2 = feedforward_backward(lc["ff"], dsum2)
            dx_mid = dsum2 + dnormed2
            dsum1, dscale1, doffset1 = layer_norm_backward(lc["ln1"], dx_mid)
            g = multi_head_attention_backward(lc["mha"], dsum1)
            dx = dsum1 + g["dx"]

        grads[f"layer{i}.ff.w1"] = dw1
        grads[f"layer{i}.ff.b1"] = db1
        grads[f"layer{i}.ff.w2"] = dw2
        grads[f"layer{i}.ff.b2"] = db2
        grads[f"layer{i}.norm1.scale"] = dscale1
        grads[f"layer{i}.norm1.offset"] = doffset1
        grads[f"layer{i}.norm2.scale"] = dscale2
        grads[f"layer{i}.norm2.offset"] = doffset2
        grads[f"layer{i}.wq"] = g["dwq"]
        grads[f"layer{i}.wk"] = g["dwk"]
        grads[f"layer{i}.wv"] = g["dwv"]
        grads[f"layer{i}.wo"] = g["dwo"]
        if cfg.use_relative:
            for h in range(cfg.heads):
                tg = g["tables"][h]
                if cfg.attention_mode == "global":
                    grads[f"layer{i}.head{h}.rel"] = tg["dtable"]
                else:
                    grads[f"layer{i}.head{h}.rel_left"] = tg["dtable_left"]
                    grads[f"layer{i}.head{h}.rel_right"] = tg["dtable_right"]

    provider: _PitchTimeProvider | None = cache["provider"]
    if provider is not None:
        grads["time_table"] = provider.d_time
        grads["pitch_table"] = provider.d_pitch

    # Embedding + positional combination: only the embedding channels carry
    # parameters; the sinusoid/instrument channels have none.
    demb = dx[:, : cfg.embedding_width] * cache["emb_scale"]
    np.add.at(grads["token_embedding"], cache["tokens"], demb)
    return grads


# ---------------------------------------------------------------------------
# Loss


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean NLL in nats over rows; returns (nll, d_logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    nll = -float(log_probs[np.arange(n), targets].mean())
    d = np.exp(log_probs)
    d[np.arange(n), targets] -= 1.0
    return nll, d / n


def sequence_nll(cfg: ModelConfig, weights: ModelWeights, tokens, token_attributes=None,
                 max_len: int | None = None, dropout_rng: np.random.Generator | None = None):
    """Shifted next-token mean NLL of a sequence; returns (nll, d_logits, cache)."""
    logits, cache = forward(
        cfg,
        weights,
        tokens,
        token_attributes=token_attributes,
        max_len=max_len,
        dropout_rng=dropout_rng,
    )
    tokens = cache["tokens"]
    if len(tokens) < 2:
        raise ConfigurationError("need at least two tokens for next-token loss")
    nll, d_rows = cross_entropy(logits[:-1], tokens[1:])
    d_logits = np.zeros_like(logits)
    d_logits[:-1] = d_rows
    return nll, d_logits, cache


# ---------------------------------------------------------------------------
# Attention trace (post-softmax weights export)


@dataclass
class AttentionTrace:
    """Post-softmax attention rows for selected query positions."""

    rows: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"rows": self.rows}


def build_trace(cache: dict, positions=None) -> AttentionTrace:
    """Extract per-layer, per-head weight rows from a forward cache."""
    cfg: ModelConfig = cache["cfg"]
    T = len(cache["tokens"])
    wanted = list(range(T)) if positions is None else sorted(set(positions))
    trace = AttentionTrace()
    for layer, per_head in enumerate(cache["head_weights"]):
        for head, hw in enumerate(per_head):
            if cfg.attention_mode == "global":
                w = hw.array
                for t in wanted:
                    trace.rows.append(
                        {
                            "layer": layer,
                            "head": head,
                            "query": t,
                            "keys": list(range(t + 1)),
                            "weights": w[t, : t + 1].tolist(),
                        }
                    )
            else:
                N = cfg.block_length
                for t in wanted:
                    b, i = divmod(t, N)
                    w = hw[b].array
                    start = 0 if b == 0 else (b - 1) * N
                    span = list(range(start, b * N + i + 1))
                    row = w[i, : i + 1] if b == 0 else w[i, : N + i + 1]
                    trace.rows.append(
                        {
                            "layer": layer,
                            "head": head,
                            "query": t,
                            "keys": span,
                            "weights": row.tolist(),
                        }
                    )
    return trace


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, cfg: ModelConfig, weights: ModelWeights, step: int | None = None):
    payload = {f"param/{k}": v for k, v in weights.params.items()}
    payload["__config__"] = np.frombuffer(cfg.to_json().encode("utf-8"), dtype=np.uint8)
    payload["__version__"] = np.array([CHECKPOINT_FORMAT_VERSION], dtype=np.int64)
    payload["__step__"] = np.array([-1 if step is None else step], dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[ModelConfig, ModelWeights, int]:
    try:
        archive = np.load(path)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__version__" not in archive:
        raise CheckpointError(f"{path} is not a versioned checkpoint")
    version = int(archive["__version__"][0])
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format v{version} unsupported (expected v{CHECKPOINT_FORMAT_VERSION})"
        )
    cfg = ModelConfig.from_dict(json.loads(archive["__config__"].tobytes().decode("utf-8")))
    params = {
        k[len("param/") :]: archive[k] for k in archive.files if k.startswith("param/")
    }
    weights = ModelWeights(params)
    weights.validate_against(cfg)
    step = int(archive["__step__"][0])
    return cfg, weights, step
