"""Clinical dose metrics: Dx, Dmean, HI, DVH curves, absolute errors and the paired t-test."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import betainc

from app.errors import EmptyStructureError, NumericError
from app.models import MetricRow, SummaryRow


logger = logging.getLogger(__name__)

STRUCTURE_METRICS = ("D98", "D95", "D2", "D50", "Dmean")
ERROR_METRICS = ("D98", "D95", "Dmean")
HI_FORMULA = "HI = (D2 - D98) / D50"


def _masked(dose: np.ndarray, mask: np.ndarray) -> np.ndarray:
    dose = np.asarray(dose, dtype=np.float64)
    mask = np.asarray(mask) > 0.5
    if dose.shape != mask.shape:
        raise ValueError(f"dose {dose.shape} and mask {mask.shape} are not aligned")
    values = dose[mask]
    if values.size == 0:
        raise EmptyStructureError("structure mask is empty")
    return values


def dose_at_volume(dose: np.ndarray, mask: np.ndarray, x: float) -> float:
    """Dx: the dose at rank ceil(x/100 * n) of the masked doses sorted descending."""
    if not 0 < x <= 100:
        raise ValueError(f"volume percentage must be in (0, 100], got {x}")
    values = np.sort(_masked(dose, mask))[::-1]
    # x * n / 100 can land a few ulps above an integer
    rank = max(1, math.ceil(round(x * values.size / 100.0, 9)))
    return float(values[rank - 1])


def mean_dose(dose: np.ndarray, mask: np.ndarray) -> float:
    return float(np.mean(_masked(dose, mask)))


def clip_negative_dose(dose: np.ndarray) -> np.ndarray:
    """Predictions come from a linear head; every evaluated dose is read as max(dose, 0)."""
    return np.clip(np.asarray(dose, dtype=np.float64), 0.0, None)


def abs_error_map(predicted: np.ndarray, ground_truth: np.ndarray) -> np.ndarray:
    """Voxelwise |prediction - ground truth| with the prediction read as max(dose, 0)."""
    if np.shape(predicted) != np.shape(ground_truth):
        raise ValueError(f"prediction {np.shape(predicted)} and ground truth {np.shape(ground_truth)} differ")
    return np.abs(clip_negative_dose(predicted) - np.asarray(ground_truth, dtype=np.float64))


def heterogeneity_index(dose: np.ndarray, ptv_mask: np.ndarray) -> float:
    d50 = dose_at_volume(dose, ptv_mask, 50)
    if d50 <= 0:
        raise NumericError(f"heterogeneity index undefined: D50 is {d50!r}")
    return (dose_at_volume(dose, ptv_mask, 2) - dose_at_volume(dose, ptv_mask, 98)) / d50


@dataclass
class DVHCurve:
    dose_bins: np.ndarray
    volume_fraction: np.ndarray

    def dose_at_fraction(self, fraction: float) -> float:
        """Highest bin dose still covering `fraction` of the volume."""
        covered = np.nonzero(self.volume_fraction >= fraction)[0]
        return float(self.dose_bins[covered[-1]]) if covered.size else 0.0


def dvh(dose: np.ndarray, mask: np.ndarray, num_bins: int = 256, max_dose: Optional[float] = None) -> DVHCurve:
    """Cumulative DVH on `num_bins` evenly spaced doses spanning [0, max_dose].

    Doses must be non-negative, so the first bin always covers the whole structure.
    """
    if num_bins < 2:
        raise ValueError(f"num_bins must be at least 2, got {num_bins}")
    values = np.sort(_masked(dose, mask))
    if values[0] < 0:
        raise ValueError(f"DVH needs non-negative doses, got minimum {values[0]!r}")
    top = float(values[-1]) if max_dose is None else float(max_dose)
    if top <= 0:
        top = 1.0
    bins = np.linspace(0.0, top, num_bins)
    counts = values.size - np.searchsorted(values, bins, side="left")
    return DVHCurve(dose_bins=bins, volume_fraction=counts / values.size)


def structure_metrics(dose: np.ndarray, mask: np.ndarray) -> Dict[str, float]:
    return {
        "D98": dose_at_volume(dose, mask, 98),
        "D95": dose_at_volume(dose, mask, 95),
        "D2": dose_at_volume(dose, mask, 2),
        "D50": dose_at_volume(dose, mask, 50),
        "Dmean": mean_dose(dose, mask),
    }


def abs_error_metrics(
    pred_dose: np.ndarray, gt_dose: np.ndarray, structures: Mapping[str, np.ndarray]
) -> Dict[str, Dict[str, float]]:
    if np.shape(pred_dose) != np.shape(gt_dose):
        raise ValueError(f"prediction {np.shape(pred_dose)} and ground truth {np.shape(gt_dose)} differ")
    errors: Dict[str, Dict[str, float]] = {}
    pred_dose = clip_negative_dose(pred_dose)
    for name, mask in structures.items():
        pred = structure_metrics(pred_dose, mask)
        gt = structure_metrics(gt_dose, mask)
        errors[name] = {metric: abs(pred[metric] - gt[metric]) for metric in ERROR_METRICS}
    return errors


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    degenerate: bool = False


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-tailed paired t-test with the t tail from the regularized incomplete beta function."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be aligned 1-D arrays, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError(f"paired t-test needs at least 2 pairs, got {n}")
    diff = a - b
    mean = float(np.mean(diff))
    sd = float(np.std(diff, ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, df=df, p=1.0)
        return TTestResult(t=math.copysign(math.inf, mean), df=df, p=0.0, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    # NaN stays NaN
    return TTestResult(t=t, df=df, p=float(np.clip(p, 0.0, 1.0)))


def cohort_stats(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation, ignoring NaNs (sd is 0 for fewer than two values)."""
    arr = np.asarray(values, dtype=np.float64)
    arr = arr[~np.isnan(arr)]
    if arr.size == 0:
        return float("nan"), float("nan")
    sd = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(np.mean(arr)), sd


@dataclass
class CaseInput:
    name: str
    predicted: np.ndarray
    ground_truth: np.ndarray
    structures: Dict[str, np.ndarray]


@dataclass
class CaseMetrics:
    name: str
    predicted: Dict[str, Dict[str, float]]
    ground_truth: Dict[str, Dict[str, float]]
    hi_predicted: float
    hi_ground_truth: float
    dvh_predicted: Dict[str, DVHCurve] = field(default_factory=dict)
    dvh_ground_truth: Dict[str, DVHCurve] = field(default_factory=dict)

    def abs_error(self, structure: str, metric: str) -> float:
        return abs(self.predicted[structure][metric] - self.ground_truth[structure][metric])


def _safe_hi(dose: np.ndarray, ptv: np.ndarray, case: str) -> float:
    try:
        return heterogeneity_index(dose, ptv)
    except NumericError as exc:
        logger.warning("case %s: %s", case, exc)
        return float("nan")


def evaluate_case(case: CaseInput, num_bins: int = 256) -> CaseMetrics:
    dose = clip_negative_dose(case.predicted)
    clipped = int(np.count_nonzero(np.asarray(case.predicted) < 0))
    if clipped:
        logger.debug("case %s: %d negative predicted voxels read as 0", case.name, clipped)
    predicted: Dict[str, Dict[str, float]] = {}
    ground_truth: Dict[str, Dict[str, float]] = {}
    dvh_pred: Dict[str, DVHCurve] = {}
    dvh_gt: Dict[str, DVHCurve] = {}
    for name, mask in case.structures.items():
        if not (np.asarray(mask) > 0.5).any():
            logger.warning("case %s: structure %s is empty, skipped", case.name, name)
            continue
        predicted[name] = structure_metrics(dose, mask)
        ground_truth[name] = structure_metrics(case.ground_truth, mask)
        inside = np.asarray(mask) > 0.5
        # shared bins so the two curves line up row by row
        top = max(float(np.max(dose[inside])), float(np.max(case.ground_truth[inside])))
        dvh_pred[name] = dvh(dose, mask, num_bins, max_dose=top)
        dvh_gt[name] = dvh(case.ground_truth, mask, num_bins, max_dose=top)
    ptv = case.structures["ptv"]
    return CaseMetrics(
        name=case.name,
        predicted=predicted,
        ground_truth=ground_truth,
        hi_predicted=_safe_hi(dose, ptv, case.name),
        hi_ground_truth=_safe_hi(case.ground_truth, ptv, case.name),
        dvh_predicted=dvh_pred,
        dvh_ground_truth=dvh_gt,
    )


# cohort summary columns: (label, structure, metric or HI)
SUMMARY_METRICS = (("HI", "ptv", "HI"), ("|dD98|", "ptv", "D98"), ("|dD95|", "ptv", "D95"), ("|dDmean|", "ptv", "Dmean"))


@dataclass
class MetricsReport:
    cases: List[CaseMetrics]
    prescription_gy: float = 1.0

    def metric_rows(self) -> List[MetricRow]:
        scale = self.prescription_gy
        rows: List[MetricRow] = []
        for case in self.cases:
            for structure, values in case.predicted.items():
                for metric in STRUCTURE_METRICS:
                    pred = values[metric] * scale
                    gt = case.ground_truth[structure][metric] * scale
                    rows.append(
                        MetricRow(
                            case=case.name,
                            structure=structure,
                            metric=metric,
                            predicted=pred,
                            ground_truth=gt,
                            abs_error=abs(pred - gt),
                        )
                    )
        return rows

    def hi_rows(self) -> List[Dict[str, object]]:
        return [
            {"case": case.name, "hi_predicted": case.hi_predicted, "hi_ground_truth": case.hi_ground_truth}
            for case in self.cases
        ]

    def oar_rows(self) -> List[Dict[str, object]]:
        rows: List[Dict[str, object]] = []
        for case in self.cases:
            for structure in case.predicted:
                if structure != "ptv":
                    rows.append(
                        {
                            "case": case.name,
                            "structure": structure,
                            "abs_dDmean": case.abs_error(structure, "Dmean") * self.prescription_gy,
                        }
                    )
        return rows

    def dvh_rows(self) -> List[Dict[str, object]]:
        rows: List[Dict[str, object]] = []
        for case in self.cases:
            for source, curves in (("predicted", case.dvh_predicted), ("ground_truth", case.dvh_ground_truth)):
                for structure, curve in curves.items():
                    for bin_dose, fraction in zip(curve.dose_bins, curve.volume_fraction):
                        rows.append(
                            {
                                "case": case.name,
                                "source": source,
                                "structure": structure,
                                "bin_dose": float(bin_dose) * self.prescription_gy,
                                "volume_fraction": float(fraction),
                            }
                        )
        return rows

    def per_case(self, structure: str, metric: str) -> Dict[str, float]:
        """Per-case HI of the prediction, or the per-case absolute error of a metric."""
        values: Dict[str, float] = {}
        for case in self.cases:
            if metric == "HI":
                values[case.name] = case.hi_predicted
            elif structure in case.predicted:
                values[case.name] = case.abs_error(structure, metric) * self.prescription_gy
        return values

    def summary(self, reference: Optional["MetricsReport"] = None) -> List[SummaryRow]:
        rows: List[SummaryRow] = []
        for label, structure, metric in SUMMARY_METRICS:
            mine = self.per_case(structure, metric)
            mean, sd = cohort_stats(list(mine.values()))
            p = None
            if reference is not None:
                p = paired_p(mine, reference.per_case(structure, metric))
            rows.append(SummaryRow(metric=label, mean=mean, sd=sd, p=p))
        return rows


def paired_p(mine: Mapping[str, float], reference: Mapping[str, float]) -> Optional[float]:
    """p-value of the paired t-test over cases present in both runs; None when fewer than two pairs."""
    shared = [name for name in mine if name in reference and not (math.isnan(mine[name]) or math.isnan(reference[name]))]
    if len(shared) < 2:
        return None
    return paired_t_test([mine[n] for n in shared], [reference[n] for n in shared]).p


def evaluate_cases(
    cases: Sequence[CaseInput], num_bins: int = 256, workers: int = 4, prescription_gy: float = 1.0
) -> MetricsReport:
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        metrics = list(pool.map(lambda case: evaluate_case(case, num_bins), cases))
    logger.info("evaluated %d cases", len(metrics))
    return MetricsReport(cases=metrics, prescription_gy=prescription_gy)
