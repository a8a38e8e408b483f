"""Composite dose objective, SGD with a poly schedule, and the training loop for arms A-D."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app import autodiff as ad
from app.autodiff import Tensor
from app.checkpoint import Checkpoint
from app.errors import DataError, NumericError, ShapeError, TrainingAborted
from app.models import ModelConfig, TrainConfig, TrainStepRecord
from app.network import PredictionBundle, TCtrans, stack_inputs, stack_targets
from app.phantom import Sample
from app.triplet import ScaleTerm, TripletDiagnostics, multiscale_terms, scale_term, sum_terms


logger = logging.getLogger(__name__)


def dose_loss(y_hat: Tensor, y: Tensor) -> Tensor:
    """Mean absolute dose error over all pixels."""
    if y_hat.shape != y.shape:
        raise ShapeError("dose_loss", "prediction and target differ", [y_hat.shape, y.shape])
    return ad.mean_all(ad.abs(ad.sub(y_hat, y)))


def total_loss(l_dose: Tensor, l_mtp: Tensor, omega: float) -> Tensor:
    if omega < 0:
        raise ValueError(f"omega must be non-negative, got {omega}")
    return ad.add(l_dose, ad.scale(l_mtp, omega))


def poly_lr(step: int, max_steps: int, lr0: float, power: float) -> float:
    if max_steps <= 0:
        raise ValueError(f"max_steps must be positive, got {max_steps}")
    if not 0 <= step <= max_steps:
        raise ValueError(f"step {step} outside [0, {max_steps}]")
    return lr0 * (1.0 - step / max_steps) ** power


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    """Plain SGD update from each parameter's accumulated `.grad`; grads are cleared afterwards.

    Every gradient is checked before any parameter moves, so a rejected step leaves the model intact.
    """
    for index, param in enumerate(params):
        if param.grad is not None and not np.all(np.isfinite(param.grad)):
            label = param.name or f"#{index}"
            raise NumericError(f"non-finite gradient in parameter {label} {param.shape}")
    for param in params:
        if param.grad is not None:
            param.data = (param.data - lr * param.grad).astype(param.data.dtype)
        param.grad = None


def update_schedule(num_samples: int, effective_batch: int, epochs: int, max_steps: Optional[int] = None) -> List[int]:
    """Pass counts of each optimizer update, in order.

    Groups hold `effective_batch` passes and never cross an epoch boundary; `max_steps`
    truncates the pass stream (extending epochs when needed) and the last group is flushed.
    """
    if num_samples <= 0:
        raise DataError("training set is empty")
    total = max_steps if max_steps is not None else epochs * num_samples
    groups: List[int] = []
    done = 0
    while done < total:
        left_in_epoch = num_samples - done % num_samples
        size = min(effective_batch, left_in_epoch, total - done)
        groups.append(size)
        done += size
    return groups


def _sample_order(num_samples: int, seed: int) -> Iterator[Tuple[int, int]]:
    rng = np.random.default_rng(seed)
    epoch = 0
    while True:
        for index in rng.permutation(num_samples):
            yield epoch, int(index)
        epoch += 1


def arm_model_config(config: ModelConfig, arm: str) -> ModelConfig:
    return config.model_copy(update={"use_transformer": arm != "A"})


@dataclass
class TrainLog:
    records: List[TrainStepRecord] = field(default_factory=list)
    epoch_seconds: List[float] = field(default_factory=list)

    @property
    def num_scales(self) -> int:
        return len(self.records[0].separation) if self.records else 0

    def columns(self) -> List[str]:
        return ["step", "lr", "l_dose", "l_mtp", "l_total"] + [
            f"sep_scale{r}" for r in range(1, self.num_scales + 1)
        ]

    def rows(self) -> List[List[object]]:
        return [
            [rec.step, repr(rec.lr), repr(rec.l_dose), repr(rec.l_mtp), repr(rec.l_total)]
            + [repr(value) for value in rec.separation]
            for rec in self.records
        ]


def write_train_log(log: TrainLog, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(log.columns())
        writer.writerows(log.rows())


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: TrainLog
    best: Optional[Checkpoint] = None
    best_val_loss: Optional[float] = None
    diagnostics: Optional[TripletDiagnostics] = None
    updates: int = 0


@dataclass
class StepLosses:
    l_dose: Tensor
    l_mtp: Tensor
    total: Tensor
    terms: List[ScaleTerm]


def _detached_terms(bundle: PredictionBundle, sample: Sample, config: TrainConfig) -> List[ScaleTerm]:
    features = [f.detach() for f in bundle.features]
    return multiscale_terms(features, sample.ptv, config.patch_S, config.margin, normalize=config.normalize_triplet)


def compute_losses(bundle: PredictionBundle, sample: Sample, y: Tensor, config: TrainConfig) -> StepLosses:
    """Per-arm objective: A/B use L_dose alone, C one full-resolution L_tp, D the multi-scale sum."""
    l_dose = dose_loss(bundle.y_hat, y)
    arm = config.ablation_arm
    if arm == "D":
        terms = multiscale_terms(
            bundle.features, sample.ptv, config.patch_S, config.margin, normalize=config.normalize_triplet
        )
        l_mtp = sum_terms(terms)
    elif arm == "C":
        target = bundle.y_hat if config.triplet_on_prediction else bundle.features[-1]
        term = scale_term(
            target, sample.ptv, config.patch_S, config.margin, normalize=config.normalize_triplet, scale=len(bundle.features)
        )
        l_mtp = term.loss
        terms = _detached_terms(bundle, sample, config)
    else:
        l_mtp = Tensor(np.zeros((), dtype=l_dose.data.dtype))
        terms = _detached_terms(bundle, sample, config)
    total = total_loss(l_dose, l_mtp, config.omega) if config.uses_triplet else l_dose
    return StepLosses(l_dose=l_dose, l_mtp=l_mtp, total=total, terms=terms)


def validation_loss(model: TCtrans, samples: Sequence[Sample]) -> float:
    losses = []
    for sample in samples:
        bundle = model(stack_inputs([sample]))
        losses.append(dose_loss(bundle.y_hat, stack_targets([sample])).item())
    return float(np.mean(losses))


def train(
    dataset: Sequence[Sample],
    model: TCtrans,
    config: TrainConfig,
    validation: Optional[Sequence[Sample]] = None,
    on_step: Optional[Callable[[TrainStepRecord], None]] = None,
) -> TrainResult:
    if not dataset:
        raise DataError("training set is empty")
    if model.config.use_transformer != config.uses_transformer:
        raise ShapeError("train", f"arm {config.ablation_arm} expects use_transformer={config.uses_transformer}")

    num_samples = len(dataset)
    groups = update_schedule(num_samples, config.effective_batch, config.epochs, config.max_steps)
    params = model.parameters()
    model.zero_grad()
    order = _sample_order(num_samples, config.seed)

    log = TrainLog()
    last_good = Checkpoint.from_model(model)
    best: Optional[Checkpoint] = None
    best_val: Optional[float] = None
    diagnostics: Optional[TripletDiagnostics] = None
    step = 0
    epoch_started = time.perf_counter()
    logger.info(
        "training arm %s: %d samples, %d passes in %d updates", config.ablation_arm, num_samples, sum(groups), len(groups)
    )

    for update, size in enumerate(groups):
        lr = poly_lr(update, len(groups), config.lr0, config.poly_power)
        for _ in range(size):
            _, index = next(order)
            sample = dataset[index]
            bundle = model(stack_inputs([sample]))
            losses = compute_losses(bundle, sample, stack_targets([sample]), config)
            l_total = losses.total.item()
            if not math.isfinite(l_total):
                raise TrainingAborted(f"loss became {l_total} at step {step}", last_good=last_good, log=log)
            ad.backward(ad.scale(losses.total, 1.0 / size))
            diagnostics = TripletDiagnostics(losses.terms)
            record = TrainStepRecord(
                step=step,
                update=update,
                lr=lr,
                l_dose=losses.l_dose.item(),
                l_mtp=losses.l_mtp.item(),
                l_total=l_total,
                separation=diagnostics.separations,
            )
            log.records.append(record)
            logger.debug("step %d lr %.3e l_dose %.5f l_mtp %.5f", step, lr, record.l_dose, record.l_mtp)
            if on_step is not None:
                on_step(record)
            step += 1
        try:
            sgd_step(params, lr)
        except NumericError as exc:
            raise TrainingAborted(str(exc), last_good=last_good, log=log) from exc
        last_good = Checkpoint.from_model(model)

        if step % num_samples == 0 or update == len(groups) - 1:
            log.epoch_seconds.append(time.perf_counter() - epoch_started)
            message = f"epoch {len(log.epoch_seconds)} done at step {step}"
            if validation:
                val = validation_loss(model, validation)
                message += f", validation L_dose {val:.5f}"
                if best_val is None or val < best_val:
                    best_val, best = val, Checkpoint.from_model(model)
            logger.info(message)
            epoch_started = time.perf_counter()

    return TrainResult(
        checkpoint=last_good,
        log=log,
        best=best,
        best_val_loss=best_val,
        diagnostics=diagnostics,
        updates=len(groups),
    )
