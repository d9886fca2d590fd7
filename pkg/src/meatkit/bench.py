"""Analytic complexity accounting and an empirical fusion benchmark.

The analytic side evaluates the closed-form element counts of the five
attention schemes (self, dense multiview, row-wise, epipolar, mesh) for the
query, key/value and attention-map tensors. The empirical side builds a
seeded synthetic scene, runs one fusion pass per runnable scheme and size,
and records instrumented element counts, wall time and the peak transient
allocation of the pass (inputs excluded). Row-wise attention assumes
orthographic cameras of equal height, which contradicts the perspective
rig, so it is counted analytically but never run.
"""

from __future__ import annotations

import gc
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from .bench_support import scheme_runner
from .errors import BudgetExceeded, MeatkitError

ROW_ORDER = ("self", "dense", "row_wise", "epipolar", "mesh")
RUNNABLE = ("self", "dense", "epipolar", "mesh")
ROW_LABELS = {
    "self": "Self-Attn",
    "dense": "Dense MV",
    "row_wise": "Row-wise",
    "epipolar": "Epipolar",
    "mesh": "Mesh Attn",
}


@dataclass(frozen=True)
class ComplexityParams:
    """Problem size: views N, square feature size S, channels C, epipolar
    depth samples K and the grid sampling constant d (4 = floor/ceil x/y)."""

    n_views: int
    feature_size: int
    channels: int
    depth_samples: int = 8
    grid_constant: int = 4

    def __post_init__(self):
        for name in ("n_views", "feature_size", "channels", "depth_samples", "grid_constant"):
            if int(getattr(self, name)) < 1:
                raise MeatkitError(f"{name} must be >= 1")


@dataclass(frozen=True)
class SchemeCounts:
    q_elements: int
    kv_elements: int
    attn_map_elements: int

    def to_dict(self) -> dict:
        return {"q": self.q_elements, "kv": self.kv_elements, "attn_map": self.attn_map_elements}


@dataclass
class MeasuredRun:
    scheme: str
    params: ComplexityParams
    q_elements: int = 0
    kv_elements: int = 0
    embed_elements: int = 0
    attn_map_elements: int = 0
    attn_map_bytes: int = 0
    peak_bytes: int = 0
    wall_seconds: float = 0.0
    estimated: bool = False


@dataclass
class ComplexityReport:
    analytic: dict = field(default_factory=dict)  # (scheme, params) handled per size
    sizes: list = field(default_factory=list)
    measured: list = field(default_factory=list)

    def to_dict(self, include_measurements: bool = False) -> dict:
        sizes = []
        for p in self.sizes:
            sizes.append(
                {
                    "n_views": p.n_views,
                    "feature_size": p.feature_size,
                    "channels": p.channels,
                    "depth_samples": p.depth_samples,
                    "grid_constant": p.grid_constant,
                    "analytic": {k: v.to_dict() for k, v in complexity_counts(p).items()},
                }
            )
        measured = []
        for m in self.measured:
            row = {
                "scheme": m.scheme,
                "n_views": m.params.n_views,
                "feature_size": m.params.feature_size,
                "channels": m.params.channels,
                "depth_samples": m.params.depth_samples,
                "q_elements": m.q_elements,
                "kv_elements": m.kv_elements,
                "embed_elements": m.embed_elements,
                "attn_map_elements": m.attn_map_elements,
                "attn_map_bytes": m.attn_map_bytes,
                "estimated": m.estimated,
            }
            if include_measurements:
                # wall time and tracemalloc peak carry allocator noise; they
                # never land in artifacts, only on stdout and in-memory
                row["wall_seconds"] = m.wall_seconds
                row["peak_bytes"] = m.peak_bytes
            measured.append(row)
        return {"sizes": sizes, "measured": measured}


def complexity_counts(params: ComplexityParams) -> dict:
    """Closed-form element counts for every scheme at one size."""
    n = int(params.n_views)
    s = int(params.feature_size)
    c = int(params.channels)
    k = int(params.depth_samples)
    d = int(params.grid_constant)
    return {
        "self": SchemeCounts(n * c * s**2, n * c * s**2, n * s**4),
        "dense": SchemeCounts(n * c * s**2, n * c * (n * s**2), n**2 * s**4),
        "row_wise": SchemeCounts((n * s) * c * s, (n * s) * c * (n * s), n**2 * s**3),
        "epipolar": SchemeCounts((n * s**2) * c, (n * s**2) * c * (n * k * d), n**2 * s**2 * k * d),
        "mesh": SchemeCounts((n * s**2) * c, (n * s**2) * c * (n * d), n**2 * s**2 * d),
    }


def estimate_pass_bytes(scheme: str, params: ComplexityParams, embed_dim: int = 27) -> int:
    """Rough f32 footprint of one fusion pass, for the budget gate.

    Counts the attention-map buffer (held ~3x through softmax) plus the
    gathered key features with their embedding concat.
    """
    counts = complexity_counts(params)[scheme]
    c = params.channels
    kv_with_embed = counts.kv_elements * (c + embed_dim) // max(c, 1)
    return 4 * (3 * counts.attn_map_elements + 2 * kv_with_embed + counts.q_elements)


def run_benchmark(
    schemes,
    sizes,
    seed: int = 0,
    budget_bytes: int = 4 << 30,
    embed_bands: int = 4,
) -> ComplexityReport:
    """Measure one fusion pass per (scheme, size) under a memory budget.

    Schemes whose estimated footprint exceeds the budget are reported as
    estimated-only rows (counts from the closed forms, no timing). If no
    requested pair fits the budget at all, BudgetExceeded is raised.
    Everything except timings and peak bytes is a deterministic function
    of the seed.
    """
    schemes = list(schemes)
    for s in schemes:
        if s not in RUNNABLE:
            raise MeatkitError(f"scheme {s!r} is not runnable (choose from {RUNNABLE})")
    sizes = list(sizes)
    report = ComplexityReport(sizes=sizes)
    embed_dim = (2 * embed_bands + 1) * 3
    runnable_pairs = [
        (sch, p) for p in sizes for sch in schemes if estimate_pass_bytes(sch, p, embed_dim) <= budget_bytes
    ]
    if not runnable_pairs and schemes and sizes:
        raise BudgetExceeded("no requested scheme/size fits the memory budget")

    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    try:
        for p in sizes:
            fixture = scheme_runner.build_fixture(p, seed, embed_bands, schemes)
            for sch in schemes:
                run = MeasuredRun(scheme=sch, params=p)
                if estimate_pass_bytes(sch, p, embed_dim) > budget_bytes:
                    counts = complexity_counts(p)[sch]
                    run.q_elements = counts.q_elements
                    run.kv_elements = counts.kv_elements
                    run.attn_map_elements = counts.attn_map_elements
                    run.attn_map_bytes = 4 * counts.attn_map_elements
                    run.peak_bytes = estimate_pass_bytes(sch, p, embed_dim)
                    run.estimated = True
                    report.measured.append(run)
                    continue
                gc.collect()
                tracemalloc.reset_peak()
                base, _ = tracemalloc.get_traced_memory()
                t0 = time.perf_counter()
                stats = scheme_runner.run(sch, fixture)
                run.wall_seconds = time.perf_counter() - t0
                _, peak = tracemalloc.get_traced_memory()
                run.peak_bytes = max(peak - base, 0)
                run.q_elements = stats.q_elements
                run.kv_elements = stats.kv_elements
                run.embed_elements = stats.embed_elements
                run.attn_map_elements = stats.attn_map_elements
                run.attn_map_bytes = 4 * stats.attn_map_elements
                report.measured.append(run)
            del fixture
            gc.collect()
    finally:
        if not was_tracing:
            tracemalloc.stop()
    return report


def format_table(report: ComplexityReport) -> str:
    """Aligned text table in the canonical row order, one block per size."""
    lines = []
    measured_by = {}
    for m in report.measured:
        measured_by[(m.scheme, m.params.feature_size, m.params.n_views)] = m
    for p in report.sizes:
        counts = complexity_counts(p)
        lines.append(
            f"N={p.n_views} S={p.feature_size} C={p.channels} "
            f"K={p.depth_samples} d={p.grid_constant}"
        )
        header = f"{'Attn. Type':<12}{'Q':>14}{'K,V':>16}{'Attn. Map':>16}{'Peak MiB':>12}{'Time s':>10}"
        lines.append(header)
        lines.append("-" * len(header))
        for scheme in ROW_ORDER:
            cnt = counts[scheme]
            m = measured_by.get((scheme, p.feature_size, p.n_views))
            if m is None:
                peak = time_s = "-"
            elif m.estimated:
                peak, time_s = f"~{m.peak_bytes / 2**20:.1f}", "est."
            else:
                peak, time_s = f"{m.peak_bytes / 2**20:.1f}", f"{m.wall_seconds:.3f}"
            lines.append(
                f"{ROW_LABELS[scheme]:<12}{cnt.q_elements:>14}{cnt.kv_elements:>16}"
                f"{cnt.attn_map_elements:>16}{peak:>12}{time_s:>10}"
            )
        lines.append("")
    return "\n".join(lines)
