"""
軽量プロファイラーのテスト
"""

import logging

import numpy as np
import pytest

from core.profiler import (
    ProfilerModel,
    ProfilingRecord,
    RankDeficientError,
    fit,
    predict_accuracy,
    predict_ratio,
    predict_size,
    quality_grid,
    synthesize_records,
)
from core.types import InvariantError, QualityPlan


def exact_records(triples, proportions, alpha, alpha_s, betas, beta_a):
    records = []
    for q in triples:
        q_bar = sum(w * v for w, v in zip(proportions, q))
        acc = sum(b * v for b, v in zip(betas, q)) + beta_a
        records.append(ProfilingRecord(q, proportions, alpha * q_bar + alpha_s, acc))
    return records


class TestFit:
    def test_exact_size_model(self):
        triples = [(15, 45, 75), (15, 60, 45), (45, 45, 45), (60, 75, 60)]
        records = exact_records(triples, (0.7, 0.2, 0.1), 0.01, 0.05, (0.001, 0.004, 0.01), 0.02)
        assert [r.mean_quality for r in records] == pytest.approx([27, 27, 45, 63])
        model = fit(records, 3)
        assert model.alpha == pytest.approx(0.01, abs=1e-9)
        assert model.alpha_s == pytest.approx(0.05, abs=1e-9)
        assert model.size_r2 == pytest.approx(1.0, abs=1e-9)

    def test_exact_accuracy_model(self):
        triples = [(a, b, c) for a in (15, 75) for b in (15, 75) for c in (15, 75)]
        records = exact_records(triples, (0.5, 0.3, 0.2), 0.01, 0.05, (0.001, 0.004, 0.01), 0.02)
        model = fit(records, 3)
        assert model.betas == pytest.approx((0.001, 0.004, 0.01), abs=1e-9)
        assert model.beta_a == pytest.approx(0.02, abs=1e-9)
        assert model.acc_r2 == pytest.approx(1.0, abs=1e-9)

    def test_noiseless_grid_recovers_truth(self, palette):
        records = synthesize_records(0.008, 0.01, (0.002, 0.004, 0.006), 0.05, palette, seed=3)
        assert len(records) == 125
        model = fit(records, 3)
        assert model.alpha == pytest.approx(0.008, abs=1e-9)
        assert model.alpha_s == pytest.approx(0.01, abs=1e-9)
        assert model.betas == pytest.approx((0.002, 0.004, 0.006), abs=1e-9)
        assert model.beta_a == pytest.approx(0.05, abs=1e-9)

    def test_noisy_grid_recovers_alpha(self, palette):
        for seed in range(20):
            records = synthesize_records(0.01, 0.05, (0.002, 0.004, 0.006), 0.05, palette,
                                         noise_std=0.01, seed=seed)
            model = fit(records, 3)
            assert model.alpha == pytest.approx(0.01, rel=0.10), f"seed={seed}"

    def test_residuals_orthogonal_to_regressors(self, palette):
        records = synthesize_records(0.01, 0.05, (0.002, 0.004, 0.006), 0.05, palette,
                                     noise_std=0.01, seed=11)
        model = fit(records, 3)
        q_bar = np.array([r.mean_quality for r in records])
        ratios = np.array([r.observed_compression_ratio for r in records])
        residual = ratios - (model.alpha * q_bar + model.alpha_s)
        assert abs(residual.sum()) < 1e-9
        assert abs(residual @ q_bar) < 1e-7

    def test_collinear_regressor_is_named(self):
        triples = [(15, 15, 15), (30, 30, 45), (45, 45, 15), (60, 60, 75), (75, 75, 30)]
        records = exact_records(triples, (0.5, 0.3, 0.2), 0.01, 0.05, (0.001, 0.002, 0.004), 0.02)
        with pytest.raises(RankDeficientError) as exc:
            fit(records, 3)
        assert exc.value.model == "accuracy"
        assert exc.value.regressor == "q_1"

    def test_constant_mean_quality_is_rank_deficient(self):
        records = exact_records([(45, 45, 45)] * 5, (0.5, 0.3, 0.2), 0.01, 0.05,
                                (0.001, 0.004, 0.01), 0.02)
        with pytest.raises(RankDeficientError) as exc:
            fit(records, 3)
        assert exc.value.model == "size"

    def test_too_few_records(self):
        records = exact_records([(15, 15, 15)], (0.5, 0.3, 0.2), 0.01, 0.05,
                                (0.001, 0.004, 0.01), 0.02)
        with pytest.raises(RankDeficientError):
            fit(records, 3)

    def test_negative_beta_warns(self, palette, caplog):
        records = synthesize_records(0.01, 0.05, (-0.001, 0.004, 0.006), 0.2, palette, seed=5)
        with caplog.at_level(logging.WARNING, logger="core.profiler"):
            model = fit(records, 3)
        assert model.betas[0] < 0
        assert "β_c" in caplog.text

    def test_k_mismatch(self):
        records = exact_records([(15, 15, 15), (30, 30, 30)], (0.5, 0.3, 0.2), 0.01, 0.05,
                                (0.001, 0.004, 0.01), 0.02)
        with pytest.raises(InvariantError):
            fit(records, 2)


class TestPredict:
    def test_size_example(self, linear_model):
        plan = QualityPlan((15, 45, 75))
        assert predict_ratio(linear_model, plan.per_class_quality, (0.7, 0.2, 0.1)) == pytest.approx(0.32)
        assert predict_size(linear_model, plan, (0.7, 0.2, 0.1), 1_000_000) == pytest.approx(320000)

    def test_zero_slope(self):
        model = ProfilerModel(0.0, 0.05, (0.0, 0.0, 0.0), 0.0)
        for q in [(15, 15, 15), (75, 30, 45)]:
            assert predict_size(model, QualityPlan(q), (0.2, 0.3, 0.5), 1_000_000) == pytest.approx(50000)

    def test_size_clamped_to_original(self):
        model = ProfilerModel(0.1, 0.5, (0.0, 0.0, 0.0), 0.0)
        assert predict_size(model, QualityPlan((75, 75, 75)), (0.2, 0.3, 0.5), 1000) == 1000.0

    def test_infeasible_plan_has_no_size(self, linear_model):
        with pytest.raises(InvariantError):
            predict_size(linear_model, QualityPlan.infeasible(3), (0.2, 0.3, 0.5), 1000)

    def test_accuracy_example(self, linear_model):
        assert predict_accuracy(linear_model, QualityPlan((15, 30, 45))) == pytest.approx(0.605)

    def test_accuracy_zero_betas(self):
        model = ProfilerModel(0.01, 0.05, (0.0, 0.0, 0.0), 0.42)
        assert predict_accuracy(model, QualityPlan((75, 75, 75))) == 0.42

    def test_accuracy_clamped(self, linear_model):
        assert predict_accuracy(linear_model, QualityPlan((75, 75, 75))) == 1.0

    def test_accuracy_monotone(self, linear_model, palette):
        for c in range(3):
            values = []
            for q in palette.levels:
                plan = [30, 30, 30]
                plan[c] = q
                values.append(predict_accuracy(linear_model, QualityPlan(tuple(plan))))
            assert values == sorted(values)


class TestGridAndRecords:
    def test_quality_grid_order(self, palette):
        grid = quality_grid(palette, 3)
        assert len(grid) == 125
        assert grid[0] == (15, 15, 15)
        assert grid[-1] == (75, 75, 75)
        assert grid == sorted(grid)

    def test_record_validation(self):
        with pytest.raises(InvariantError):
            ProfilingRecord((15, 30), (0.5, 0.6), 0.2, 0.5)
        with pytest.raises(InvariantError):
            ProfilingRecord((15, 30), (0.5, 0.5), 1.5, 0.5)
        with pytest.raises(InvariantError):
            ProfilingRecord((15,), (0.5, 0.5), 0.5, 0.5)

    def test_model_dict_round_trip(self, linear_model):
        assert ProfilerModel.from_dict(linear_model.to_dict()) == linear_model

    def test_synthesized_records_are_seeded(self, palette):
        a = synthesize_records(0.01, 0.05, (0.002, 0.004, 0.006), 0.05, palette, noise_std=0.01, seed=9)
        b = synthesize_records(0.01, 0.05, (0.002, 0.004, 0.006), 0.05, palette, noise_std=0.01, seed=9)
        assert a == b
