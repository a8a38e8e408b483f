"""CSV artifacts: metric tables, DVH curves, cohort summaries, ablation comparison, diagnostics."""
from __future__ import annotations

import csv
import logging
import os
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

from app.dataset import encode_prediction
from app.dosimetry import HI_FORMULA, SUMMARY_METRICS, CaseInput, MetricsReport, abs_error_map, cohort_stats, paired_p
from app.errors import IntegrityError
from app.models import ARM_LABELS, GradCheckRow
from app.triplet import DIAGNOSTIC_COLUMNS, TripletDiagnostics


logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
PTV_HI_FILE = "ptv_hi.csv"
OAR_FILE = "oar_dmean.csv"
DVH_FILE = "dvh.csv"
SUMMARY_FILE = "summary.csv"
ABLATION_FILE = "ablation.csv"
GRADCHECK_FILE = "gradcheck.csv"
TRIPLET_FILE = "triplet_diagnostics.csv"
ERROR_MAP_DIR = "error_maps"
ERROR_MAP_FILE = "error_maps.csv"


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def write_csv(path: str, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> int:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(column)) for column in columns])
            count += 1
    return count


def read_csv(path: str) -> List[Dict[str, str]]:
    if not os.path.isfile(path):
        raise IntegrityError(f"missing report file {path}")
    with open(path, "r", encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def write_metrics_report(report: MetricsReport, out_dir: str, reference: Optional[MetricsReport] = None) -> Dict[str, int]:
    """Write every evaluation table into `out_dir`; returns the row count per file."""
    counts = {
        METRICS_FILE: write_csv(
            os.path.join(out_dir, METRICS_FILE),
            ["case", "structure", "metric", "predicted", "ground_truth", "abs_error"],
            (row.model_dump() for row in report.metric_rows()),
        ),
        PTV_HI_FILE: write_csv(
            os.path.join(out_dir, PTV_HI_FILE),
            ["case", "hi_predicted", "hi_ground_truth", "hi_formula"],
            ({**row, "hi_formula": HI_FORMULA} for row in report.hi_rows()),
        ),
        OAR_FILE: write_csv(os.path.join(out_dir, OAR_FILE), ["case", "structure", "abs_dDmean"], report.oar_rows()),
        DVH_FILE: write_csv(
            os.path.join(out_dir, DVH_FILE),
            ["case", "source", "structure", "bin_dose", "volume_fraction"],
            report.dvh_rows(),
        ),
        SUMMARY_FILE: write_csv(
            os.path.join(out_dir, SUMMARY_FILE),
            ["metric", "mean", "sd", "p"],
            (row.model_dump() for row in report.summary(reference)),
        ),
    }
    logger.info("wrote evaluation tables to %s: %s", out_dir, counts)
    return counts


def read_per_case(eval_dir: str) -> Dict[str, Dict[str, float]]:
    """Per-case summary values of a finished evaluation, keyed by summary label then case."""
    values: Dict[str, Dict[str, float]] = {label: {} for label, _, _ in SUMMARY_METRICS}
    for row in read_csv(os.path.join(eval_dir, PTV_HI_FILE)):
        values["HI"][row["case"]] = float(row["hi_predicted"]) if row["hi_predicted"] else float("nan")
    wanted = {(structure, metric): label for label, structure, metric in SUMMARY_METRICS if metric != "HI"}
    for row in read_csv(os.path.join(eval_dir, METRICS_FILE)):
        label = wanted.get((row["structure"], row["metric"]))
        if label is not None:
            values[label][row["case"]] = float(row["abs_error"])
    return values


def ablation_rows(runs: Sequence[Mapping[str, Any]]) -> List[Dict[str, Any]]:
    """One row per run with mean, sd and the paired p-value against the first run.

    Each run mapping carries `run`, `arm` and `per_case` (as returned by read_per_case).
    """
    rows: List[Dict[str, Any]] = []
    reference = runs[0]["per_case"] if runs else {}
    for index, run in enumerate(runs):
        arm = run.get("arm") or ""
        row: Dict[str, Any] = {"run": run["run"], "arm": arm, "label": ARM_LABELS.get(arm, "")}
        for label, _, _ in SUMMARY_METRICS:
            per_case = run["per_case"][label]
            mean, sd = cohort_stats(list(per_case.values()))
            row[f"{label}_mean"] = mean
            row[f"{label}_sd"] = sd
            row[f"{label}_p"] = paired_p(per_case, reference[label]) if index > 0 else None
        rows.append(row)
    return rows


def ablation_columns() -> List[str]:
    columns = ["run", "arm", "label"]
    for label, _, _ in SUMMARY_METRICS:
        columns.extend([f"{label}_mean", f"{label}_sd", f"{label}_p"])
    return columns


def write_ablation(rows: Sequence[Mapping[str, Any]], path: str) -> int:
    return write_csv(path, ablation_columns(), rows)


def write_gradcheck(rows: Sequence[GradCheckRow], path: str) -> int:
    columns = ["name", "precision", "max_relative_error", "checked", "skipped", "tolerance", "passed"]
    return write_csv(path, columns, (row.model_dump() for row in rows))


def write_triplet_diagnostics(diagnostics: TripletDiagnostics, path: str) -> int:
    return write_csv(path, DIAGNOSTIC_COLUMNS, diagnostics.rows())



def write_error_maps(cases: Sequence[CaseInput], out_dir: str, prescription_gy: float = 1.0) -> int:
    """One TCTP plane of |prediction - ground truth| per case plus a per-case summary table."""
    map_dir = os.path.join(out_dir, ERROR_MAP_DIR)
    os.makedirs(map_dir, exist_ok=True)
    rows = []
    for case in cases:
        error = abs_error_map(case.predicted, case.ground_truth) * prescription_gy
        with open(os.path.join(map_dir, f"{case.name}.tctp"), "wb") as handle:
            handle.write(encode_prediction(error))
        rows.append(
            {
                "case": case.name,
                "file": f"{ERROR_MAP_DIR}/{case.name}.tctp",
                "mean_abs_error": float(error.mean()),
                "max_abs_error": float(error.max()),
            }
        )
    return write_csv(os.path.join(out_dir, ERROR_MAP_FILE), ["case", "file", "mean_abs_error", "max_abs_error"], rows)
