"""Memory benchmark: quadratic gather path vs the skewed path.

Accounting follows the two-class split used throughout: "relative embeddings"
(the table itself, plus the (L, L, D_h) gather tensor on the naive path) vs
"relative logits" (everything (L, L)-shaped on the way to S^rel).  Analytic
byte counts are exact closed forms; measured peaks come from the allocation
meter.  MB means 10^6 bytes.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tc
from .attention import RelativeEmbeddingTable, naive_srel_global, srel_global
from .tensor import CAT_REL_EMBED, CAT_REL_LOGITS, AllocationMeter

__all__ = ["BenchRow", "BenchReport", "run_bench", "MB"]

MB = 1_000_000


@dataclass
class BenchRow:
    length: int
    head_dim: int
    precision: str
    analytic_r_bytes: int
    analytic_er_bytes: int
    analytic_srel_bytes: int
    efficient_rel_embed_peak: int
    efficient_rel_logits_peak: int
    efficient_total_peak: int
    efficient_wall_s: float
    naive_measured: bool
    naive_rel_embed_peak: int | None = None
    naive_rel_logits_peak: int | None = None
    naive_total_peak: int | None = None
    naive_wall_s: float | None = None

    @property
    def rel_embed_ratio(self) -> float:
        """Naive / efficient peak for the relative-embedding class."""
        if self.naive_measured:
            return self.naive_rel_embed_peak / self.efficient_rel_embed_peak
        return self.analytic_r_bytes / self.analytic_er_bytes

    @property
    def speedup(self) -> float | None:
        if self.naive_measured and self.efficient_wall_s > 0:
            return self.naive_wall_s / self.efficient_wall_s
        return None


@dataclass
class BenchReport:
    head_dim: int
    precision: str
    naive_limit_mb: float
    rows: list[BenchRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        payload = asdict(self)
        for row, src in zip(payload["rows"], self.rows):
            row["rel_embed_ratio"] = src.rel_embed_ratio
            row["speedup"] = src.speedup
        return payload

    def format_table(self) -> str:
        header = (
            f"{'L':>6} {'R (MB)':>10} {'E^r (MB)':>9} {'S^rel (MB)':>10} "
            f"{'naive peak':>12} {'eff peak':>10} {'embed ratio':>11} {'speedup':>8}"
        )
        lines = [
            f"memory per layer per head, D_h={self.head_dim}, {self.precision} "
            f"(MB = 10^6 bytes)",
            header,
            "-" * len(header),
        ]
        for r in self.rows:
            naive = f"{r.naive_total_peak / MB:.3g}" if r.naive_measured else "analytic*"
            speed = f"{r.speedup:.1f}x" if r.speedup else "-"
            lines.append(
                f"{r.length:>6} {r.analytic_r_bytes / MB:>10.3g} "
                f"{r.analytic_er_bytes / MB:>9.3g} {r.analytic_srel_bytes / MB:>10.3g} "
                f"{naive:>12} {r.efficient_total_peak / MB:>10.3g} "
                f"{r.rel_embed_ratio:>11.3g} {speed:>8}"
            )
        if any(not r.naive_measured for r in self.rows):
            lines.append(
                f"* naive gather exceeds the {self.naive_limit_mb:g} MB measurement "
                "limit; analytic values only"
            )
        return "\n".join(lines)


def run_bench(
    lengths,
    head_dim: int = 64,
    precision: str = "f32",
    naive_limit_mb: float = 512.0,
    seed: int = 0,
) -> BenchReport:
    """Measure both relative-logit paths at each length.

    The naive path is measured only when its gather tensor fits under
    `naive_limit_mb`; otherwise the row is flagged and carries analytic
    numbers alone.
    """
    if precision not in ("f32", "f64"):
        raise ValueError(f"precision must be f32 or f64, got {precision!r}")
    dtype = np.float32 if precision == "f32" else np.float64
    itemsize = np.dtype(dtype).itemsize
    rng = np.random.default_rng(seed)
    report = BenchReport(head_dim=head_dim, precision=precision, naive_limit_mb=naive_limit_mb)

    for length in lengths:
        q = rng.standard_normal((length, head_dim)).astype(dtype)
        table_values = rng.standard_normal((length, head_dim)).astype(dtype)
        analytic_r = length * length * head_dim * itemsize
        analytic_er = length * head_dim * itemsize
        analytic_srel = length * length * itemsize

        meter = AllocationMeter()
        with meter.measure():
            with tc.alloc_category(CAT_REL_EMBED):
                table = RelativeEmbeddingTable("global", tc.tensor(table_values, dtype=dtype))
            t0 = time.perf_counter()
            srel = srel_global(tc.wrap(q), table)
            eff_wall = time.perf_counter() - t0
            del srel
        row = BenchRow(
            length=length,
            head_dim=head_dim,
            precision=precision,
            analytic_r_bytes=analytic_r,
            analytic_er_bytes=analytic_er,
            analytic_srel_bytes=analytic_srel,
            efficient_rel_embed_peak=meter.peak_for(CAT_REL_EMBED),
            efficient_rel_logits_peak=meter.peak_for(CAT_REL_LOGITS),
            efficient_total_peak=meter.peak_bytes,
            efficient_wall_s=eff_wall,
            naive_measured=analytic_r <= naive_limit_mb * MB,
        )
        if row.naive_measured:
            meter = AllocationMeter()
            with meter.measure():
                with tc.alloc_category(CAT_REL_EMBED):
                    table = RelativeEmbeddingTable(
                        "global", tc.tensor(table_values, dtype=dtype)
                    )
                t0 = time.perf_counter()
                srel = naive_srel_global(tc.wrap(q), table)
                row.naive_wall_s = time.perf_counter() - t0
                del srel
            row.naive_rel_embed_peak = meter.peak_for(CAT_REL_EMBED)
            row.naive_rel_logits_peak = meter.peak_for(CAT_REL_LOGITS)
            row.naive_total_peak = meter.peak_bytes
        report.rows.append(row)
    return report
