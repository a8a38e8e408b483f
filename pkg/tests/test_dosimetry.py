from __future__ import annotations

import logging
import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import gammaln

from app.dosimetry import (
    CaseInput,
    abs_error_metrics,
    clip_negative_dose,
    cohort_stats,
    dose_at_volume,
    dvh,
    evaluate_case,
    evaluate_cases,
    heterogeneity_index,
    mean_dose,
    paired_p,
    paired_t_test,
    structure_metrics,
)
from app.errors import EmptyStructureError, NumericError


def _t_tail_oracle(t, df):
    log_norm = gammaln((df + 1) / 2) - gammaln(df / 2) - 0.5 * math.log(df * math.pi)

    def density(x):
        return math.exp(log_norm - (df + 1) / 2 * math.log1p(x * x / df))

    tail, _ = quad(density, abs(t), np.inf)
    return min(1.0, 2.0 * tail)


@pytest.fixture
def ramp():
    dose = np.arange(1.0, 101.0).reshape(10, 10)
    return dose, np.ones((10, 10))


def test_dose_at_volume_examples(ramp):
    dose, mask = ramp
    assert dose_at_volume(dose, mask, 95) == 6.0
    assert dose_at_volume(dose, mask, 100) == 1.0
    assert dose_at_volume(np.full((4, 4), 0.7), np.ones((4, 4)), 37) == 0.7


def test_dose_at_volume_rejects_bad_input(ramp):
    dose, mask = ramp
    with pytest.raises(ValueError):
        dose_at_volume(dose, mask, 0)
    with pytest.raises(ValueError):
        dose_at_volume(dose, mask, 101)
    with pytest.raises(EmptyStructureError):
        dose_at_volume(dose, np.zeros_like(mask), 50)


def test_dose_at_volume_is_monotone(rng):
    dose = rng.uniform(size=(20, 20))
    mask = rng.uniform(size=(20, 20)) > 0.4
    values = [dose_at_volume(dose, mask, x) for x in (2, 50, 95, 98)]
    assert values == sorted(values, reverse=True)


def test_mean_dose(rng):
    assert mean_dose(np.array([[0.0, 1.0]]), np.ones((1, 2))) == 0.5
    dose = rng.uniform(size=(16, 16))
    mask = rng.uniform(size=(16, 16)) > 0.5
    expected = sum(dose[i, j] for i in range(16) for j in range(16) if mask[i, j]) / mask.sum()
    assert mean_dose(dose, mask) == pytest.approx(expected, abs=1e-7)


def test_heterogeneity_index():
    ramp = np.linspace(0.9, 1.1, 1000).reshape(20, 50)
    mask = np.ones_like(ramp)
    assert heterogeneity_index(ramp, mask) == pytest.approx(0.192, abs=1e-3)
    assert heterogeneity_index(3.0 * ramp, mask) == pytest.approx(heterogeneity_index(ramp, mask))
    assert heterogeneity_index(np.full((4, 4), 0.8), np.ones((4, 4))) == 0.0
    with pytest.raises(NumericError):
        heterogeneity_index(np.zeros((4, 4)), np.ones((4, 4)))


def test_dvh_uniform_dose_is_a_step():
    curve = dvh(np.full((6, 6), 0.5), np.ones((6, 6)), num_bins=11, max_dose=1.0)
    np.testing.assert_allclose(curve.volume_fraction[:6], 1.0)
    np.testing.assert_allclose(curve.volume_fraction[6:], 0.0)


def test_dvh_matches_direct_count(rng):
    dose = rng.uniform(0.0, 1.2, size=(24, 24))
    mask = rng.uniform(size=(24, 24)) > 0.3
    curve = dvh(dose, mask, num_bins=64)
    values = dose[mask]
    for bin_dose, fraction in zip(curve.dose_bins, curve.volume_fraction):
        assert fraction == np.count_nonzero(values >= bin_dose) / values.size
    assert curve.volume_fraction[0] == 1.0
    assert np.all(np.diff(curve.volume_fraction) <= 0)


def test_dvh_agrees_with_dose_at_volume(rng):
    dose = rng.uniform(size=(20, 20))
    mask = np.ones((20, 20))
    curve = dvh(dose, mask, num_bins=256)
    width = curve.dose_bins[1] - curve.dose_bins[0]
    for x in (2, 50, 95, 98):
        assert abs(curve.dose_at_fraction(x / 100) - dose_at_volume(dose, mask, x)) <= width


def test_dvh_rejects_bad_input():
    with pytest.raises(ValueError):
        dvh(np.ones((2, 2)), np.ones((2, 2)), num_bins=1)
    with pytest.raises(ValueError):
        dvh(np.array([[0.5, -0.1]]), np.ones((1, 2)))


def test_heterogeneity_index_needs_positive_median():
    with pytest.raises(NumericError):
        heterogeneity_index(np.full((4, 4), -0.2), np.ones((4, 4)))


def test_clip_negative_dose():
    np.testing.assert_array_equal(clip_negative_dose(np.array([-0.5, 0.0, 0.7])), [0.0, 0.0, 0.7])


def test_abs_error_metrics(rng):
    gt = rng.uniform(size=(16, 16))
    structures = {"ptv": rng.uniform(size=(16, 16)) > 0.5, "bladder": rng.uniform(size=(16, 16)) > 0.7}
    zero = abs_error_metrics(gt, gt, structures)
    assert all(value == 0.0 for errors in zero.values() for value in errors.values())
    shifted = abs_error_metrics(gt + 0.1, gt, structures)
    for errors in shifted.values():
        assert errors["Dmean"] == pytest.approx(0.1)
    pred = rng.uniform(size=(16, 16))
    errors = abs_error_metrics(pred, gt, structures)
    for name, mask in structures.items():
        p, g = structure_metrics(pred, mask), structure_metrics(gt, mask)
        assert errors[name] == {metric: abs(p[metric] - g[metric]) for metric in ("D98", "D95", "Dmean")}


def test_paired_t_test_examples():
    diffs = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    result = paired_t_test(diffs, np.zeros(5))
    assert result.t == pytest.approx(4.2426, abs=1e-4)
    assert result.df == 4
    assert result.p == pytest.approx(0.0132, abs=1e-4)
    flipped = paired_t_test(np.zeros(5), diffs)
    assert flipped.t == pytest.approx(-result.t)
    assert flipped.p == pytest.approx(result.p)


def test_paired_t_test_degenerate_cases():
    same = paired_t_test([0.3, 0.5, 0.7], [0.3, 0.5, 0.7])
    assert (same.t, same.p) == (0.0, 1.0)
    shifted = paired_t_test([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])
    assert shifted.degenerate
    assert shifted.t == math.inf and shifted.p == 0.0
    with pytest.raises(ValueError):
        paired_t_test([1.0], [2.0])
    with pytest.raises(ValueError):
        paired_t_test([1.0, 2.0], [1.0, 2.0, 3.0])


@pytest.mark.parametrize("df", [2, 5, 12, 30, 60])
def test_paired_t_test_matches_integrated_density(rng, df):
    for shift in (0.0, 0.3, 1.5):
        a = rng.normal(shift, 1.0, size=df + 1)
        b = rng.normal(0.0, 0.2, size=df + 1)
        result = paired_t_test(a, b)
        assert result.p == pytest.approx(_t_tail_oracle(result.t, df), abs=1e-3)


def test_cohort_stats_ignores_nan():
    mean, sd = cohort_stats([1.0, float("nan"), 3.0])
    assert mean == 2.0
    assert sd == pytest.approx(math.sqrt(2.0))
    assert cohort_stats([4.0]) == (4.0, 0.0)


def _case(name, gt, pred, ptv):
    return CaseInput(name=name, predicted=pred, ground_truth=gt, structures={"ptv": ptv, "rectum": ~ptv})


@pytest.fixture
def plane(rng):
    ptv = np.zeros((16, 16), dtype=bool)
    ptv[4:12, 4:12] = True
    gt = np.where(ptv, 1.0, 0.3) + 0.01 * rng.normal(size=(16, 16))
    return gt, ptv


def test_evaluate_case(plane):
    gt, ptv = plane
    metrics = evaluate_case(_case("c1", gt, gt + 0.05, ptv), num_bins=32)
    assert metrics.abs_error("ptv", "Dmean") == pytest.approx(0.05)
    assert metrics.abs_error("rectum", "D95") == pytest.approx(0.05)
    assert metrics.hi_ground_truth >= 0
    curve_p, curve_g = metrics.dvh_predicted["ptv"], metrics.dvh_ground_truth["ptv"]
    np.testing.assert_array_equal(curve_p.dose_bins, curve_g.dose_bins)


def test_evaluate_case_skips_empty_structures(plane):
    gt, ptv = plane
    case = CaseInput(name="c", predicted=gt, ground_truth=gt, structures={"ptv": ptv, "bladder": np.zeros_like(ptv)})
    metrics = evaluate_case(case)
    assert list(metrics.predicted) == ["ptv"]


def test_zero_prediction_gives_nan_hi_with_warning(plane, caplog):
    gt, ptv = plane
    with caplog.at_level(logging.WARNING, logger="app.dosimetry"):
        metrics = evaluate_case(_case("flat", gt, np.zeros_like(gt), ptv))
    assert math.isnan(metrics.hi_predicted)
    assert "D50" in caplog.text


def test_report_rows_and_summary(plane, rng):
    gt, ptv = plane
    cases = [_case(f"c{k}", gt, gt + rng.uniform(0.0, 0.1), ptv) for k in range(4)]
    report = evaluate_cases(cases, num_bins=16, workers=2, prescription_gy=50.0)
    assert [case.name for case in report.cases] == ["c0", "c1", "c2", "c3"]
    assert len(report.metric_rows()) == 4 * 2 * 5
    assert len(report.dvh_rows()) == 4 * 2 * 2 * 16
    assert len(report.oar_rows()) == 4
    ptv_dmean = [row for row in report.metric_rows() if row.structure == "ptv" and row.metric == "Dmean"]
    assert ptv_dmean[0].abs_error == pytest.approx(report.cases[0].abs_error("ptv", "Dmean") * 50.0)

    summary = report.summary()
    assert [row.metric for row in summary] == ["HI", "|dD98|", "|dD95|", "|dDmean|"]
    assert all(row.p is None for row in summary)
    against_self = report.summary(reference=report)
    assert all(row.p == 1.0 for row in against_self)


def test_paired_p_needs_two_shared_cases():
    assert paired_p({"a": 1.0}, {"a": 2.0}) is None
    assert paired_p({"a": 1.0, "b": float("nan")}, {"a": 2.0, "b": 1.0}) is None
    assert paired_p({"a": 1.0, "b": 2.0}, {"a": 1.0, "b": 2.0}) == 1.0


def test_negative_predictions_keep_metrics_consistent(plane, rng):
    gt, ptv = plane
    predicted = gt - 0.5 + 0.02 * rng.normal(size=gt.shape)
    assert (predicted[~ptv] < 0).all()
    metrics = evaluate_case(_case("low", gt, predicted, ptv), num_bins=256)
    assert metrics.predicted["rectum"]["D98"] == 0.0
    assert metrics.hi_predicted >= 0
    for name in ("ptv", "rectum"):
        curve = metrics.dvh_predicted[name]
        width = curve.dose_bins[1] - curve.dose_bins[0]
        assert curve.volume_fraction[0] == 1.0
        for x in (2, 50, 95, 98):
            assert abs(curve.dose_at_fraction(x / 100) - metrics.predicted[name][f"D{x}"]) <= width


def test_mostly_negative_prediction_has_undefined_hi(rng):
    dose = rng.uniform(-0.8, 0.6, size=(30, 30))
    ptv = np.ones((30, 30), dtype=bool)
    case = CaseInput(name="u", predicted=dose, ground_truth=np.abs(dose) + 0.1, structures={"ptv": ptv})
    metrics = evaluate_case(case, num_bins=256)
    assert metrics.predicted["ptv"]["D98"] == 0.0
    assert math.isnan(metrics.hi_predicted)
    errors = abs_error_metrics(dose, np.abs(dose) + 0.1, {"ptv": ptv})
    assert errors["ptv"]["D98"] == pytest.approx(metrics.abs_error("ptv", "D98"))


def test_paired_t_test_keeps_nan_p():
    result = paired_t_test([1.0, float("nan"), 3.0], [0.0, 0.0, 0.5])
    assert math.isnan(result.p)
