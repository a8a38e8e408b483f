"""Command-line entry point: gen-data, train, predict, evaluate, gradcheck, report."""
from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
import time
from typing import Any, Callable, Dict, List, Optional, Sequence

from pydantic import ValidationError

from app import autodiff as ad
from app.audit import write_audit_log
from app.checkpoint import load_checkpoint, save_checkpoint
from app.config import RunConfig, Settings, dump_run_config, get_settings, load_run_config, read_snapshot
from app.dataset import decode_prediction, encode_prediction, read_dataset, read_manifest, write_dataset
from app.dosimetry import CaseInput, evaluate_cases
from app.errors import (
    EXIT_CONFIG,
    EXIT_INTERNAL,
    EXIT_OK,
    ConfigError,
    DataError,
    GradCheckFailed,
    IntegrityError,
    TCTransError,
    TrainingAborted,
)
from app.gradcheck import SUITE, run_suite
from app.models import ARM_LABELS
from app.network import build_model, stack_inputs
from app.phantom import Sample, generate_sample, split_indices
from app.reports import (
    ABLATION_FILE,
    ERROR_MAP_FILE,
    GRADCHECK_FILE,
    TRIPLET_FILE,
    ablation_rows,
    read_per_case,
    write_ablation,
    write_csv,
    write_error_maps,
    write_gradcheck,
    write_metrics_report,
    write_triplet_diagnostics,
)
from app.training import train, write_train_log


logger = logging.getLogger(__name__)

SNAPSHOT_FILE = "resolved_config.txt"
MODEL_FILE = "model.tctc"
BEST_FILE = "best.tctc"
LAST_GOOD_FILE = "last_good.tctc"
TRAIN_LOG_FILE = "train_log.csv"
EPOCH_FILE = "epochs.csv"


def _prepare_out_dir(path: str, force: bool) -> str:
    if not path:
        raise ConfigError("--out is required")
    if os.path.exists(path) and not os.path.isdir(path):
        raise ConfigError(f"output path {path} exists and is not a directory")
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ConfigError(f"output directory {path} is not empty; pass --force to overwrite")
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def _require_dir(path: str, flag: str) -> str:
    if not path:
        raise ConfigError(f"--{flag} is required")
    if not os.path.isdir(path):
        raise ConfigError(f"--{flag} {path} is not a directory")
    return path


def _write_snapshot(config: RunConfig, out_dir: str) -> None:
    with open(os.path.join(out_dir, SNAPSHOT_FILE), "w", encoding="utf-8") as handle:
        handle.write(dump_run_config(config))


def _inherit_arm(config: RunConfig, source_dir: str) -> RunConfig:
    snapshot = read_snapshot(source_dir)
    if snapshot is None or snapshot.arm == config.arm:
        return config
    logger.info("arm %s taken from %s", snapshot.arm, source_dir)
    return config.model_copy(update={"arm": snapshot.arm})


def _check_geometry(config: RunConfig, samples: Sequence[Sample]) -> None:
    for sample in samples:
        if sample.size != config.size_hw or sample.n_oar != config.n_oar:
            raise ConfigError(
                f"sample {sample.name} is {sample.size[0]}x{sample.size[1]} with {sample.n_oar} OARs; "
                f"config expects {config.size} with {config.n_oar}"
            )


def cmd_gen_data(config: RunConfig, *, force: bool, settings: Settings) -> Dict[str, Any]:
    out_dir = _prepare_out_dir(config.out, force)
    spec = config.to_phantom_spec()
    samples = [generate_sample(spec, index) for index in range(config.count)]
    labels = split_indices(config.count, config.seed)
    splits = {samples[index].name: label for index, label in labels.items()}
    manifest = write_dataset(
        samples,
        out_dir,
        splits=splits,
        organs=spec.organ_names,
        spec=spec.model_dump(mode="json"),
        seed=config.seed,
    )
    _write_snapshot(config, out_dir)
    print(f"dataset checksum {manifest.checksum} ({manifest.count} samples)")
    return {"out": out_dir, "count": manifest.count, "checksum": manifest.checksum}


def cmd_train(config: RunConfig, *, force: bool, settings: Settings) -> Dict[str, Any]:
    data_dir = _require_dir(config.data_dir, "data_dir")
    out_dir = _prepare_out_dir(config.out, force)
    read_manifest(data_dir)
    train_set = read_dataset(data_dir, "train")
    validation = read_dataset(data_dir, "val")
    if not train_set:
        raise DataError(f"no training samples in {data_dir}")
    _check_geometry(config, train_set + validation)
    _write_snapshot(config, out_dir)

    with ad.precision(config.precision):
        model = build_model(config.to_model_config(), seed=config.seed)
        print(f"arm {config.arm} ({ARM_LABELS[config.arm]}): {model.num_parameters()} parameters")
        try:
            result = train(train_set, model, config.to_train_config(), validation=validation or None)
        except TrainingAborted as exc:
            if exc.last_good is not None:
                save_checkpoint(exc.last_good, os.path.join(out_dir, LAST_GOOD_FILE))
            if exc.log is not None:
                write_train_log(exc.log, os.path.join(out_dir, TRAIN_LOG_FILE))
            raise

    save_checkpoint(result.checkpoint, os.path.join(out_dir, MODEL_FILE))
    if result.best is not None:
        save_checkpoint(result.best, os.path.join(out_dir, BEST_FILE))
    write_train_log(result.log, os.path.join(out_dir, TRAIN_LOG_FILE))
    write_csv(
        os.path.join(out_dir, EPOCH_FILE),
        ["epoch", "seconds"],
        ({"epoch": index + 1, "seconds": seconds} for index, seconds in enumerate(result.log.epoch_seconds)),
    )
    if result.diagnostics is not None:
        write_triplet_diagnostics(result.diagnostics, os.path.join(out_dir, TRIPLET_FILE))
    last = result.log.records[-1]
    print(f"trained {last.step + 1} steps / {result.updates} updates; final L_dose {last.l_dose:.6f}")
    return {
        "out": out_dir,
        "arm": config.arm,
        "parameters": model.num_parameters(),
        "steps": last.step + 1,
        "updates": result.updates,
        "final_l_dose": last.l_dose,
        "best_val_l_dose": result.best_val_loss,
    }


def cmd_predict(config: RunConfig, *, force: bool, settings: Settings) -> Dict[str, Any]:
    if not config.checkpoint or not os.path.isfile(config.checkpoint):
        raise ConfigError(f"--checkpoint {config.checkpoint!r} is not a file")
    data_dir = _require_dir(config.data_dir, "data_dir")
    out_dir = _prepare_out_dir(config.out, force)
    checkpoint = load_checkpoint(config.checkpoint)
    samples = read_dataset(data_dir, config.split)
    model_config = checkpoint.config
    for sample in samples:
        if tuple(model_config.input_size) != sample.size or model_config.in_channels != 2 + sample.n_oar:
            raise ConfigError(
                f"checkpoint expects {model_config.input_size} with {model_config.in_channels} channels; "
                f"sample {sample.name} is {sample.size} with {2 + sample.n_oar}"
            )
    config = _inherit_arm(config, os.path.dirname(os.path.abspath(config.checkpoint)))
    _write_snapshot(config, out_dir)

    with ad.precision(config.precision):
        model = checkpoint.to_model()
        for sample in samples:
            y_hat = model(stack_inputs([sample])).y_hat.data[0, 0]
            with open(os.path.join(out_dir, f"{sample.name}.tctp"), "wb") as handle:
                handle.write(encode_prediction(y_hat))
    print(f"wrote {len(samples)} predictions to {out_dir}")
    return {"out": out_dir, "count": len(samples), "split": config.split, "arm": config.arm}


def _load_predictions(pred_dir: str) -> Dict[str, Any]:
    predictions = {}
    for path in sorted(glob.glob(os.path.join(pred_dir, "*.tctp"))):
        stem = os.path.splitext(os.path.basename(path))[0]
        with open(path, "rb") as handle:
            predictions[stem] = decode_prediction(handle.read(), name=stem)
    return predictions


def cmd_evaluate(config: RunConfig, *, force: bool, settings: Settings) -> Dict[str, Any]:
    pred_dir = _require_dir(config.pred_dir, "pred_dir")
    data_dir = _require_dir(config.data_dir, "data_dir")
    out_dir = _prepare_out_dir(config.out, force)
    organs = read_manifest(data_dir).organs
    samples = read_dataset(data_dir, config.split)
    predictions = _load_predictions(pred_dir)
    missing = sorted({s.name for s in samples} - set(predictions))
    extra = sorted(set(predictions) - {s.name for s in samples})
    if missing or extra:
        raise IntegrityError(
            f"{len(predictions)} predictions for {len(samples)} samples; missing {missing[:3]}, unexpected {extra[:3]}"
        )
    cases = [
        CaseInput(
            name=sample.name,
            predicted=predictions[sample.name],
            ground_truth=sample.dose,
            structures=sample.structures(organs),
        )
        for sample in samples
    ]
    for case in cases:
        if case.predicted.shape != case.ground_truth.shape:
            raise IntegrityError(f"prediction for {case.name} is {case.predicted.shape}, dose is {case.ground_truth.shape}")
    config = _inherit_arm(config, pred_dir)
    _write_snapshot(config, out_dir)
    options = config.to_eval_options(workers=settings.workers)
    report = evaluate_cases(cases, options.dvh_bins, options.workers, options.prescription_gy)
    counts = write_metrics_report(report, out_dir)
    counts[ERROR_MAP_FILE] = write_error_maps(cases, out_dir, options.prescription_gy)
    summary = {row.metric: row.mean for row in report.summary()}
    for label, mean in summary.items():
        print(f"{label}: {mean:.6f}")
    return {"out": out_dir, "cases": len(cases), "rows": counts, "summary": summary, "arm": config.arm}


def cmd_gradcheck(config: RunConfig, *, force: bool, settings: Settings) -> Dict[str, Any]:
    names = [name.strip() for name in config.ops.split(",") if name.strip()] or list(SUITE)
    unknown = [name for name in names if name not in SUITE]
    if unknown:
        raise ConfigError(f"unknown ops {unknown}; choose from {', '.join(SUITE)}")
    rows = run_suite(names, config.gradcheck_precision, seed=config.seed)
    for row in rows:
        status = "ok" if row.passed else "FAIL"
        print(f"{row.name:<20} {row.max_relative_error:.3e}  (tol {row.tolerance:.0e}, {row.checked} coords)  {status}")
    if config.out:
        out_dir = _prepare_out_dir(config.out, force)
        write_gradcheck(rows, os.path.join(out_dir, GRADCHECK_FILE))
        _write_snapshot(config, out_dir)
    failed = [row.name for row in rows if not row.passed]
    if failed:
        raise GradCheckFailed(f"gradient check failed for {', '.join(failed)}")
    return {"ops": names, "precision": config.gradcheck_precision, "max_error": max(r.max_relative_error for r in rows)}


def cmd_report(config: RunConfig, run_dirs: Sequence[str], *, force: bool, settings: Settings) -> Dict[str, Any]:
    if not run_dirs:
        raise ConfigError("report needs at least one evaluation directory")
    runs = []
    for run_dir in run_dirs:
        _require_dir(run_dir, "run")
        snapshot = read_snapshot(run_dir)
        runs.append(
            {
                "run": os.path.basename(os.path.normpath(run_dir)),
                "arm": snapshot.arm if snapshot is not None else "",
                "per_case": read_per_case(run_dir),
            }
        )
    rows = ablation_rows(runs)
    for row in rows:
        print(f"{row['run']:<16} {row['arm']:<2} {row['label']}")
    out = None
    if config.out:
        out_dir = _prepare_out_dir(config.out, force)
        out = os.path.join(out_dir, ABLATION_FILE)
        write_ablation(rows, out)
    return {"runs": [run["run"] for run in runs], "out": out}


Handler = Callable[..., Dict[str, Any]]

COMMANDS: Dict[str, Handler] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="key=value configuration file")
    parser.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
    for name, field in RunConfig.model_fields.items():
        options = [f"--{name}"]
        if "_" in name:
            options.append(f"--{name.replace('_', '-')}")
        parser.add_argument(*options, dest=name, default=None, help=field.description or f"default: {field.default}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tctrans", description="Transformer-CNN dose prediction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _add_config_flags(sub.add_parser(name))
    report = sub.add_parser("report")
    report.add_argument("runs", nargs="+", help="evaluation output directories; the first is the reference")
    _add_config_flags(report)
    return parser


def _flag_values(args: argparse.Namespace) -> Dict[str, str]:
    return {name: getattr(args, name) for name in RunConfig.model_fields if getattr(args, name, None) is not None}


def main(argv: Optional[List[str]] = None) -> int:
    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    ad.set_debug_numerics(settings.debug_numerics)
    args = build_parser().parse_args(argv)

    started = time.perf_counter()
    record: Dict[str, Any] = {"command": args.command, "run_name": settings.run_name}
    exit_code = EXIT_OK
    try:
        config = load_run_config(args.config, _flag_values(args))
        if args.command == "report":
            record.update(cmd_report(config, args.runs, force=args.force, settings=settings))
        else:
            record.update(COMMANDS[args.command](config, force=args.force, settings=settings))
    except TCTransError as exc:
        logger.error("%s failed: %s", args.command, exc)
        exit_code = exc.exit_code
        record["error"] = str(exc)
    except ValidationError as exc:
        logger.error("%s failed: invalid configuration: %s", args.command, exc)
        exit_code = EXIT_CONFIG
        record["error"] = str(exc)
    except Exception as exc:
        logger.exception("%s failed unexpectedly", args.command)
        exit_code = EXIT_INTERNAL
        record["error"] = f"{type(exc).__name__}: {exc}"
    record["exit_code"] = exit_code
    record["duration_ms"] = int((time.perf_counter() - started) * 1000)
    write_audit_log(settings.audit_log_path, record)
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
