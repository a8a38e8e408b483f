from __future__ import annotations

import math

import numpy as np
import pytest

from app.dataset import decode_prediction
from app.dosimetry import CaseInput, evaluate_cases
from app.errors import IntegrityError
from app.reports import (
    DVH_FILE,
    ERROR_MAP_DIR,
    ERROR_MAP_FILE,
    PTV_HI_FILE,
    ablation_columns,
    ablation_rows,
    read_csv,
    read_per_case,
    write_csv,
    write_error_maps,
    write_metrics_report,
)


@pytest.fixture
def report(rng):
    ptv = np.zeros((12, 12), dtype=bool)
    ptv[3:9, 3:9] = True
    gt = np.where(ptv, 1.0, 0.2)
    cases = [
        CaseInput(
            name=f"case{k}",
            predicted=gt + rng.uniform(-0.05, 0.05, size=gt.shape),
            ground_truth=gt,
            structures={"ptv": ptv, "rectum": ~ptv},
        )
        for k in range(3)
    ]
    return evaluate_cases(cases, num_bins=8, workers=1)


def test_write_csv_uses_repr_and_lf(tmp_path):
    path = tmp_path / "t.csv"
    count = write_csv(str(path), ["a", "b", "c"], [{"a": 0.1, "b": None, "c": True}])
    assert count == 1
    assert path.read_bytes() == b"a,b,c\n0.1,,true\n"


def test_read_csv_missing_file(tmp_path):
    with pytest.raises(IntegrityError):
        read_csv(str(tmp_path / "absent.csv"))


def test_metrics_report_round_trip(report, tmp_path):
    counts = write_metrics_report(report, str(tmp_path))
    assert counts[DVH_FILE] == 3 * 2 * 2 * 8
    hi = read_csv(str(tmp_path / PTV_HI_FILE))
    assert hi[0]["hi_formula"] == "HI = (D2 - D98) / D50"
    per_case = read_per_case(str(tmp_path))
    assert set(per_case) == {"HI", "|dD98|", "|dD95|", "|dDmean|"}
    assert per_case["|dDmean|"] == pytest.approx(report.per_case("ptv", "Dmean"))
    assert per_case["HI"]["case1"] == report.cases[1].hi_predicted


def test_ablation_rows_compare_against_first_run(report, tmp_path):
    write_metrics_report(report, str(tmp_path))
    per_case = read_per_case(str(tmp_path))
    runs = [
        {"run": "baseline", "arm": "A", "per_case": per_case},
        {"run": "full", "arm": "D", "per_case": per_case},
        {"run": "solo", "arm": "", "per_case": {label: {"other": 1.0} for label in per_case}},
    ]
    rows = ablation_rows(runs)
    assert [row["label"] for row in rows] == ["Baseline", "Baseline + Trans + TL + MSR", ""]
    assert rows[0]["HI_p"] is None
    assert rows[1]["HI_p"] == 1.0
    assert rows[2]["HI_p"] is None
    assert rows[2]["|dD98|_sd"] == 0.0
    assert not math.isnan(rows[0]["|dDmean|_mean"])
    assert list(rows[0]) == ablation_columns()


def test_error_maps_hold_clipped_absolute_error(tmp_path):
    gt = np.full((6, 8), 0.5)
    predicted = np.linspace(-0.2, 1.0, 48).reshape(6, 8)
    case = CaseInput(name="case0", predicted=predicted, ground_truth=gt, structures={"ptv": gt > 0})
    assert write_error_maps([case], str(tmp_path), prescription_gy=2.0) == 1
    with open(tmp_path / ERROR_MAP_DIR / "case0.tctp", "rb") as handle:
        plane = decode_prediction(handle.read())
    expected = 2.0 * np.abs(np.clip(predicted, 0.0, None) - gt)
    np.testing.assert_allclose(plane, expected, rtol=1e-6)
    row = read_csv(str(tmp_path / ERROR_MAP_FILE))[0]
    assert row["file"] == "error_maps/case0.tctp"
    assert float(row["max_abs_error"]) == pytest.approx(1.0)
