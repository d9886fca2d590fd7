import numpy as np
import pytest

from meatkit.bench import (
    ComplexityParams,
    ROW_ORDER,
    complexity_counts,
    estimate_pass_bytes,
    format_table,
    run_benchmark,
)
from meatkit.errors import BudgetExceeded, MeatkitError


class TestComplexityCounts:
    @pytest.mark.parametrize("n,s,c,k,d", [(16, 32, 8, 8, 4), (4, 8, 16, 2, 4), (1, 64, 4, 1, 4), (7, 16, 320, 12, 4)])
    def test_hand_expanded_closed_forms(self, n, s, c, k, d):
        counts = complexity_counts(ComplexityParams(n, s, c, k, d))
        assert counts["self"].q_elements == n * c * s * s
        assert counts["self"].kv_elements == n * c * s * s
        assert counts["self"].attn_map_elements == n * s * s * s * s
        assert counts["dense"].q_elements == n * c * s * s
        assert counts["dense"].kv_elements == n * c * n * s * s
        assert counts["dense"].attn_map_elements == n * n * s * s * s * s
        assert counts["row_wise"].q_elements == n * s * c * s
        assert counts["row_wise"].kv_elements == n * s * c * n * s
        assert counts["row_wise"].attn_map_elements == n * n * s * s * s
        assert counts["epipolar"].q_elements == n * s * s * c
        assert counts["epipolar"].kv_elements == n * s * s * c * n * k * d
        assert counts["epipolar"].attn_map_elements == n * n * s * s * k * d
        assert counts["mesh"].q_elements == n * s * s * c
        assert counts["mesh"].kv_elements == n * s * s * c * n * d
        assert counts["mesh"].attn_map_elements == n * n * s * s * d

    def test_reference_size_ratios(self):
        counts = complexity_counts(ComplexityParams(16, 32, 8, 8, 4))
        assert counts["mesh"].attn_map_elements == 1_048_576
        assert counts["dense"].attn_map_elements == 268_435_456
        assert counts["mesh"].attn_map_elements / counts["dense"].attn_map_elements == 1 / 256
        assert counts["mesh"].attn_map_elements / counts["epipolar"].attn_map_elements == 1 / 8

    def test_single_view_dense_equals_self(self):
        for s in (8, 16, 64):
            counts = complexity_counts(ComplexityParams(1, s, 8))
            assert counts["dense"].attn_map_elements == counts["self"].attn_map_elements == s**4

    def test_doubling_s_scaling(self):
        a = complexity_counts(ComplexityParams(4, 16, 8))
        b = complexity_counts(ComplexityParams(4, 32, 8))
        assert b["mesh"].attn_map_elements == 4 * a["mesh"].attn_map_elements
        assert b["dense"].attn_map_elements == 16 * a["dense"].attn_map_elements

    def test_params_validated(self):
        with pytest.raises(MeatkitError):
            ComplexityParams(0, 8, 8)


class TestRunBenchmark:
    def test_measured_counts_equal_analytic(self):
        sizes = [ComplexityParams(n_views=3, feature_size=s, channels=8, depth_samples=4) for s in (8, 16)]
        report = run_benchmark(["mesh", "dense", "epipolar", "self"], sizes, seed=0)
        assert len(report.measured) == 8
        for m in report.measured:
            counts = complexity_counts(m.params)[m.scheme]
            assert not m.estimated
            assert m.q_elements == counts.q_elements
            assert m.kv_elements == counts.kv_elements
            assert m.attn_map_elements == counts.attn_map_elements
            assert m.attn_map_bytes == 4 * counts.attn_map_elements
            assert m.peak_bytes >= m.attn_map_bytes

    def test_counts_deterministic_across_runs(self):
        sizes = [ComplexityParams(n_views=2, feature_size=8, channels=4)]
        a = run_benchmark(["mesh", "dense"], sizes, seed=3)
        b = run_benchmark(["mesh", "dense"], sizes, seed=3)
        assert a.to_dict(include_measurements=False) == b.to_dict(include_measurements=False)

    def test_dense_estimated_over_budget(self):
        sizes = [ComplexityParams(n_views=4, feature_size=32, channels=8)]
        report = run_benchmark(["mesh", "dense"], sizes, seed=0, budget_bytes=32 << 20)
        by_scheme = {m.scheme: m for m in report.measured}
        assert not by_scheme["mesh"].estimated
        assert by_scheme["dense"].estimated
        assert by_scheme["dense"].attn_map_elements == complexity_counts(sizes[0])["dense"].attn_map_elements

    def test_budget_exceeded_when_nothing_fits(self):
        sizes = [ComplexityParams(n_views=4, feature_size=32, channels=8)]
        with pytest.raises(BudgetExceeded):
            run_benchmark(["dense"], sizes, seed=0, budget_bytes=1 << 20)

    def test_rejects_row_wise(self):
        with pytest.raises(MeatkitError):
            run_benchmark(["row_wise"], [ComplexityParams(2, 8, 4)], seed=0)

    def test_estimate_grows_with_size(self):
        a = estimate_pass_bytes("dense", ComplexityParams(4, 16, 8))
        b = estimate_pass_bytes("dense", ComplexityParams(4, 32, 8))
        assert b > a


class TestFormatTable:
    def test_row_order_matches_reference(self):
        report = run_benchmark(["mesh"], [ComplexityParams(2, 8, 4)], seed=0)
        text = format_table(report)
        positions = [text.index(label) for label in ("Self-Attn", "Dense MV", "Row-wise", "Epipolar", "Mesh Attn")]
        assert positions == sorted(positions)
        assert ROW_ORDER == ("self", "dense", "row_wise", "epipolar", "mesh")
