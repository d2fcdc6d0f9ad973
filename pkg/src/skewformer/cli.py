"""Command-line surface.

Exit codes: 0 on success, 1 when a verification or runtime operation fails
(oracle mismatch, gradient check over tolerance, training divergence), 2 for
invalid invocations, malformed inputs, or refused configurations.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as tc
from .attention import ConfigurationError
from .bench import run_bench
from .codec import (
    CodecError,
    apply_sustain_pedal,
    augment,
    format_notes,
    ingest_notes,
    jsb_deserialize,
    jsb_serialize,
    performance_decode,
    performance_encode,
    read_grid_file,
    read_tokens,
    write_grid_file,
    write_tokens,
)
from .model import (
    CheckpointError,
    ModelConfig,
    ModelWeights,
    backward,
    load_checkpoint,
    sequence_nll,
)
from .sampling import SampleLengthError, sample
from .training import (
    TrainSchedule,
    TrainingDiverged,
    evaluate_nll,
    make_motif_corpus,
    train,
)

EXIT_OK = 0
EXIT_FAILURE = 1  # verification/runtime failure
EXIT_USAGE = 2  # invalid invocation, bad inputs, refused configuration


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _load_corpus(directory) -> list[np.ndarray]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"corpus directory {directory} does not exist")
    files = sorted(directory.glob("*.tokens"))
    if not files:
        raise FileNotFoundError(f"no *.tokens files in {directory}")
    return [np.asarray(read_tokens(f), dtype=np.int64) for f in files]


def _load_config(path) -> ModelConfig:
    with open(path) as fh:
        return ModelConfig.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# skew-check


def cmd_skew_check(args) -> int:
    from .attention import skew_global, skew_local

    rng = np.random.default_rng(args.seed)
    if args.trials == 0:
        print("warning: --trials 0 requested; vacuous pass")
        return EXIT_OK
    failures = 0
    checked = 0
    for L in range(1, args.max_len + 1):
        tri = np.tril(np.ones((L, L), dtype=bool))
        rows = np.arange(L)[:, None]
        cols = np.arange(L)[None, :]
        src = np.clip(cols - rows + L - 1, 0, L - 1)
        for _ in range(args.trials):
            m = rng.standard_normal((L, L))
            got = skew_global(tc.wrap(m)).array
            want = m[rows, src]  # gather oracle: S[i][j] = M[i][j - i + L - 1]
            checked += 1
            if not np.array_equal(got[tri], want[tri]):
                failures += 1
    for N in range(1, args.max_block + 1):
        rows = np.arange(N)[:, None]
        cols = np.arange(N)[None, :]
        src = cols - rows + N - 1
        for _ in range(args.trials):
            m = rng.standard_normal((N, 2 * N - 1))
            got = skew_local(tc.wrap(m)).array
            checked += 1
            if not np.array_equal(got, m[rows, src]):
                failures += 1
    status = "pass" if failures == 0 else "FAIL"
    print(
        f"skew-check {status}: {checked} instances "
        f"(global L 1..{args.max_len}, local N 1..{args.max_block}, "
        f"{args.trials} trials each), {failures} mismatches"
    )
    return EXIT_OK if failures == 0 else EXIT_FAILURE


# ---------------------------------------------------------------------------
# bench-mem


def cmd_bench_mem(args) -> int:
    report = run_bench(
        args.lengths,
        head_dim=args.head_dim,
        precision=args.precision,
        naive_limit_mb=args.naive_limit_mb,
        seed=args.seed,
    )
    print(report.format_table())
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        print(f"wrote {args.json_out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def _gradcheck_config(mode: str) -> ModelConfig:
    kw = dict(
        vocab_size=13,
        max_len=8,
        depth=8,
        heads=2,
        layers=2,
        feedforward_size=16,
        dropout=0.0,
        dtype="float64",
        relative_max_distance=7,
    )
    if mode == "local":
        kw.update(attention_mode="local", block_length=4)
    else:
        kw.update(use_pitch_time_relative=True, pitch_max_interval=8, time_max_distance=4)
    return ModelConfig(**kw)


def cmd_gradcheck(args) -> int:
    tolerance = args.tolerance
    floor = 1e-2  # entries below this are compared absolutely
    h = 1e-5
    overall_worst = 0.0
    configs = (
        [("custom", _load_config(args.config))]
        if args.config
        else [("global", _gradcheck_config("global")), ("local", _gradcheck_config("local"))]
    )
    for name, cfg in configs:
        rng = np.random.default_rng(args.seed)
        weights = ModelWeights.initialize(cfg, rng)
        length = min(cfg.max_len, 8)
        tokens = rng.integers(0, cfg.vocab_size, size=length)
        attrs = None
        if cfg.use_pitch_time_relative:
            attrs = (
                rng.integers(-1, 12, size=length),
                np.sort(rng.integers(0, 5, size=length)),
            )

        nll, d_logits, cache = sequence_nll(cfg, weights, tokens, token_attributes=attrs)
        grads = backward(cache, d_logits, weights)

        worst, worst_name = 0.0, ""
        for pname in sorted(grads):
            arr = weights.params[pname]
            flat = arr.reshape(-1)
            numeric = np.zeros_like(flat)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                fp, _, _ = sequence_nll(cfg, weights, tokens, token_attributes=attrs)
                flat[idx] = orig - h
                fm, _, _ = sequence_nll(cfg, weights, tokens, token_attributes=attrs)
                flat[idx] = orig
                numeric[idx] = (fp - fm) / (2 * h)
            analytic = grads[pname].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
            err = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
            if err > worst:
                worst, worst_name = err, pname
        overall_worst = max(overall_worst, worst)
        print(f"gradcheck [{name}]: max relative error {worst:.3e} ({worst_name})")
    ok = overall_worst < tolerance
    print(f"gradcheck {'pass' if ok else 'FAIL'}: worst {overall_worst:.3e} vs {tolerance:g}")
    return EXIT_OK if ok else EXIT_FAILURE


# ---------------------------------------------------------------------------
# corpus, training, evaluation, sampling


def cmd_make_corpus(args) -> int:
    out = Path(args.out)
    for split, count, seed in (
        ("train", args.sequences, args.seed),
        ("val", args.val_sequences, args.seed + 1),
    ):
        directory = out / split
        directory.mkdir(parents=True, exist_ok=True)
        corpus = make_motif_corpus(
            count, args.length, vocab_size=args.vocab, motif_len=args.motif_len, seed=seed
        )
        for i, seq in enumerate(corpus):
            write_tokens(directory / f"seq_{i:04d}.tokens", seq)
    print(f"wrote {args.sequences} train + {args.val_sequences} val sequences under {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = ModelConfig.from_dict({**json.loads(cfg.to_json()), "seed": args.seed})
    corpus = _load_corpus(args.corpus)
    val = _load_corpus(args.val_corpus) if args.val_corpus else None
    schedule = TrainSchedule(
        steps=args.steps,
        learning_rate=args.lr,
        warmup_steps=args.warmup,
        val_every=args.val_every,
        early_stop_patience=args.patience,
        checkpoint_every=args.checkpoint_every,
    )
    attrs_fn = None
    if cfg.use_pitch_time_relative:
        from .codec import jsb_token_attributes

        attrs_fn = jsb_token_attributes
    result = train(
        cfg,
        corpus,
        schedule,
        val_sequences=val,
        out_dir=args.out,
        attrs_fn=attrs_fn,
        log_fn=print,
    )
    last = result.history[-1]
    print(
        f"done: {last['step']} steps, final train nll {last['nll']:.4f}"
        + (f", final val nll {result.final_val:.4f}" if result.final_val is not None else "")
        + (", stopped early" if result.stopped_early else "")
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, weights, _ = load_checkpoint(args.ckpt)
    corpus = _load_corpus(args.corpus)
    attrs_fn = None
    if cfg.use_pitch_time_relative:
        from .codec import jsb_token_attributes

        attrs_fn = jsb_token_attributes
    nll = evaluate_nll(cfg, weights, corpus, attrs_fn=attrs_fn, max_len=args.max_len)
    print(f"{nll:.6f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg, weights, _ = load_checkpoint(args.ckpt)
    prime = read_tokens(args.prime) if args.prime else [0]
    attrs_fn = None
    if cfg.use_pitch_time_relative:
        from .codec import jsb_token_attributes

        attrs_fn = jsb_token_attributes
    tokens, trace = sample(
        cfg,
        weights,
        prime,
        args.length,
        temperature=args.temperature,
        seed=args.seed,
        attrs_fn=attrs_fn,
        collect_trace=args.trace_out is not None,
        trace_positions=_int_list(args.trace_positions) if args.trace_positions else None,
    )
    if args.out:
        write_tokens(args.out, tokens)
        print(f"wrote {len(tokens)} tokens to {args.out}")
    else:
        print(" ".join(str(int(t)) for t in tokens))
    if args.trace_out:
        payload = {"length": len(tokens), "layers": cfg.layers, "heads": cfg.heads}
        payload.update(trace.to_dict())
        Path(args.trace_out).write_text(json.dumps(payload, indent=2) + "\n")
        print(f"wrote attention trace to {args.trace_out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# codecs


def cmd_encode(args) -> int:
    if args.codec == "jsb":
        grid = read_grid_file(args.input)
        seq = jsb_serialize(grid)
    else:
        notes, pedals = ingest_notes(args.input)
        notes = apply_sustain_pedal(notes, pedals)
        if args.transpose or abs(args.stretch - 1.0) > 1e-12:
            notes = augment(notes, args.transpose, args.stretch)
        seq = performance_encode(notes)
    write_tokens(args.output, seq.ids)
    print(f"encoded {len(seq.ids)} tokens ({args.codec}) to {args.output}")
    return EXIT_OK


def cmd_decode(args) -> int:
    ids = read_tokens(args.input)
    if args.codec == "jsb":
        grid = jsb_deserialize(ids)
        write_grid_file(args.output, grid)
        print(f"decoded {grid.shape[1]} grid steps to {args.output}")
    else:
        notes = performance_decode(ids)
        Path(args.output).write_text(format_notes(notes))
        print(f"decoded {len(notes)} notes to {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skewformer",
        description="Relative self-attention kernels, a small trainable decoder for symbolic music, and token codecs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("skew-check", help="verify both skew transforms against gather oracles")
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--max-block", type=int, default=32)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_skew_check)

    p = sub.add_parser("bench-mem", help="relative-attention memory benchmark")
    p.add_argument("--lengths", type=_int_list, default=[650, 2048, 3500])
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--precision", choices=["f32", "f64"], default="f32")
    p.add_argument("--naive-limit-mb", type=float, default=512.0)
    p.add_argument("--json-out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench_mem)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--config", default=None, help="JSON model config (default: built-ins)")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("make-corpus", help="generate a synthetic motif corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int, default=128)
    p.add_argument("--val-sequences", type=int, default=16)
    p.add_argument("--length", type=int, default=192)
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--motif-len", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_make_corpus)

    p = sub.add_parser("train", help="train a model on a token corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--val-corpus", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--warmup", type=int, default=400)
    p.add_argument("--val-every", type=int, default=250)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="mean NLL of a checkpoint on a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--max-len", type=int, default=None, help="evaluate at a longer length")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sample", help="generate tokens from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prime", default=None, help="token file used as the prefix")
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--trace-out", default=None, help="write post-softmax attention rows (JSON)")
    p.add_argument("--trace-positions", default=None, help="comma-separated query positions")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("encode", help="notes/grid file -> token file")
    p.add_argument("--codec", choices=["jsb", "performance"], required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--transpose", type=int, default=0)
    p.add_argument("--stretch", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("decode", help="token file -> notes/grid file")
    p.add_argument("--codec", choices=["jsb", "performance"], required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_decode)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (
        ConfigurationError,
        CodecError,
        CheckpointError,
        SampleLengthError,
        FileNotFoundError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
