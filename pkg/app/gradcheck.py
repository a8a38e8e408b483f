"""Central-difference gradient checking for single ops, the triplet loss and the full model."""
from __future__ import annotations

import logging
import math
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app import autodiff as ad
from app.autodiff import Graph, Tensor
from app.errors import NumericError
from app.models import GradCheckRow, ModelConfig, PhantomSpec, TrainConfig
from app.network import build_model, stack_inputs, stack_targets
from app.phantom import generate_sample
from app.training import compute_losses
from app.triplet import triplet_constraint_loss


logger = logging.getLogger(__name__)

LossBuilder = Callable[[], Tensor]


@dataclass
class GradCheckResult:
    max_relative_error: float
    checked: int
    skipped: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_relative_error < self.tolerance


@dataclass(frozen=True)
class CheckSettings:
    step: float
    tol: float
    floor: float = 1e-8
    reference: Optional[str] = None


# single-precision gradients are compared against float64 central differences
SETTINGS: Dict[str, CheckSettings] = {
    "double": CheckSettings(step=1e-5, tol=1e-6),
    "single": CheckSettings(step=1e-5, tol=1e-3, reference="double"),
}


def _evaluate(build_loss: LossBuilder) -> Tuple[float, np.ndarray]:
    loss = build_loss()
    if loss.size != 1:
        raise NumericError(f"gradient check needs a scalar loss, got shape {loss.shape}")
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"loss is {value}")
    return value, Graph.trace(loss).kink_pattern()


def grad_check(
    build_loss: LossBuilder,
    params: Sequence[Tensor],
    step: float,
    tol: float,
    num_samples: int = 50,
    seed: int = 0,
    floor: float = 1e-8,
    reference: Optional[str] = None,
) -> GradCheckResult:
    """Compare backprop against central differences on randomly sampled coordinates.

    A coordinate is skipped when perturbing it flips any relu/hinge/abs activation;
    sampling continues until `num_samples` coordinates were compared or none are left.
    With `reference` set (e.g. "double") the differences are taken at that precision
    at the same point, so the analytic gradient of the current precision is judged
    against a reference free of its own rounding.
    """
    for param in params:
        param.grad = None
    loss = build_loss()
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"loss is {value}")
    ad.backward(loss)
    analytic_pattern = Graph.trace(loss).kink_pattern()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for param in params:
        param.grad = None

    originals = [p.data for p in params]
    if reference is not None:
        reference_dtype = ad.dtype_of(reference)
        for param in params:
            param.data = param.data.astype(reference_dtype)

    offsets = np.cumsum([0] + [p.size for p in params])
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    try:
        with ad.precision(reference) if reference is not None else nullcontext():
            _, base_pattern = _evaluate(build_loss)
            if not np.array_equal(base_pattern, analytic_pattern):
                logger.warning("activation pattern differs between %s and the reference precision", loss.data.dtype)
            for coordinate in rng.permutation(int(offsets[-1])):
                if checked >= num_samples:
                    break
                which = int(np.searchsorted(offsets, coordinate, side="right") - 1)
                flat = int(coordinate - offsets[which])
                data = params[which].data.reshape(-1)
                original = data[flat]
                data[flat] = original + step
                plus, plus_pattern = _evaluate(build_loss)
                data[flat] = original - step
                minus, minus_pattern = _evaluate(build_loss)
                data[flat] = original
                if not (np.array_equal(plus_pattern, base_pattern) and np.array_equal(minus_pattern, base_pattern)):
                    skipped += 1
                    continue
                numeric = (plus - minus) / (2.0 * step)
                error = abs(float(analytic[which].reshape(-1)[flat]) - numeric) / max(abs(numeric), floor)
                worst = max(worst, error)
                checked += 1
    finally:
        for param, data in zip(params, originals):
            param.data = data
            param.grad = None
    return GradCheckResult(max_relative_error=worst, checked=checked, skipped=skipped, tolerance=tol)


# suite entries: each returns (loss builder, parameters) for a given rng


def _leaf(rng: np.random.Generator, *shape: int, low: Optional[float] = None) -> Tensor:
    data = rng.uniform(low, 2.0, size=shape) if low is not None else rng.normal(size=shape)
    return Tensor(data.astype(ad.get_dtype()), requires_grad=True)


def _unary(fn: Callable[[Tensor], Tensor], shape: Tuple[int, ...], low: Optional[float] = None):
    def entry(rng: np.random.Generator) -> Tuple[LossBuilder, List[Tensor]]:
        x = _leaf(rng, *shape, low=low)
        weights = Tensor(rng.normal(size=fn(x.detach()).shape).astype(ad.get_dtype()))
        return (lambda: ad.sum(ad.mul(fn(x), weights))), [x]

    return entry


def _conv(stride: int):
    def entry(rng: np.random.Generator) -> Tuple[LossBuilder, List[Tensor]]:
        x, w, b = _leaf(rng, 1, 2, 6, 6), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
        weights = Tensor(rng.normal(size=ad.conv2d(x, w, b, stride, 1).shape).astype(ad.get_dtype()))
        return (lambda: ad.sum(ad.mul(ad.conv2d(x, w, b, stride=stride, padding=1), weights))), [x, w, b]

    return entry


def _group_norm(rng: np.random.Generator) -> Tuple[LossBuilder, List[Tensor]]:
    x, gamma, beta = _leaf(rng, 2, 4, 3, 3), _leaf(rng, 4), _leaf(rng, 4)
    weights = Tensor(rng.normal(size=x.shape).astype(ad.get_dtype()))
    return (lambda: ad.sum(ad.mul(ad.group_norm(x, 2, gamma, beta), weights))), [x, gamma, beta]


def _layer_norm(rng: np.random.Generator) -> Tuple[LossBuilder, List[Tensor]]:
    x, gamma, beta = _leaf(rng, 2, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    weights = Tensor(rng.normal(size=x.shape).astype(ad.get_dtype()))
    return (lambda: ad.sum(ad.mul(ad.layer_norm(x, gamma, beta), weights))), [x, gamma, beta]


def _matmul(rng: np.random.Generator) -> Tuple[LossBuilder, List[Tensor]]:
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    weights = Tensor(rng.normal(size=(2, 3, 5)).astype(ad.get_dtype()))
    return (lambda: ad.sum(ad.mul(ad.matmul(a, b), weights))), [a, b]


def _add(rng: np.random.Generator) -> Tuple[LossBuilder, List[Tensor]]:
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4)
    weights = Tensor(rng.normal(size=(2, 3, 4)).astype(ad.get_dtype()))
    return (lambda: ad.sum(ad.mul(ad.add(a, b), weights))), [a, b]


def _concat(rng: np.random.Generator) -> Tuple[LossBuilder, List[Tensor]]:
    a, b = _leaf(rng, 1, 2, 3, 3), _leaf(rng, 1, 3, 3, 3)
    weights = Tensor(rng.normal(size=(1, 5, 3, 3)).astype(ad.get_dtype()))
    return (lambda: ad.sum(ad.mul(ad.concat_channels(a, b), weights))), [a, b]


def _attention(rng: np.random.Generator) -> Tuple[LossBuilder, List[Tensor]]:
    q, k, v = _leaf(rng, 1, 2, 5, 3), _leaf(rng, 1, 2, 5, 3), _leaf(rng, 1, 2, 5, 3)
    weights = Tensor(rng.normal(size=(1, 2, 5, 3)).astype(ad.get_dtype()))
    scale = 1.0 / math.sqrt(3)
    return (lambda: ad.sum(ad.mul(ad.attention(q, k, v, scale), weights))), [q, k, v]


def _triplet(rng: np.random.Generator) -> Tuple[LossBuilder, List[Tensor]]:
    mask = np.zeros((10, 10))
    mask[2:8, 3:9] = 1.0
    f = _leaf(rng, 1, 3, 10, 10)
    return (lambda: triplet_constraint_loss(f, mask, 5, 3.0)), [f]


def _model(rng: np.random.Generator) -> Tuple[LossBuilder, List[Tensor]]:
    spec = PhantomSpec(size=(32, 32), n_oar=2, falloff_sigma=3.0, seed=int(rng.integers(1 << 16)))
    sample = generate_sample(spec, 0)
    config = ModelConfig(
        in_channels=2 + spec.n_oar,
        base_width=4,
        num_enc_layers=3,
        num_transformer_layers=2,
        num_heads=4,
        input_size=spec.size,
        # every group spans at least two channels
        max_groups=2,
    )
    model = build_model(config, seed=int(rng.integers(1 << 16)))
    train_config = TrainConfig(omega=0.01, margin=0.3, patch_S=5, ablation_arm="D")
    x, y = stack_inputs([sample]), stack_targets([sample])

    def build() -> Tensor:
        return compute_losses(model(x), sample, y, train_config).total

    return build, model.parameters()


OP_ENTRIES = {
    "conv2d": _conv(1),
    "conv2d_stride2": _conv(2),
    "group_norm": _group_norm,
    "layer_norm": _layer_norm,
    "matmul": _matmul,
    "relu": _unary(ad.relu, (3, 7)),
    "softmax": _unary(ad.softmax_lastdim, (3, 5)),
    "add": _add,
    "concat_channels": _concat,
    "upsample2x_nearest": _unary(ad.upsample2x_nearest, (1, 2, 3, 3)),
    "mean_all": _unary(ad.mean_all, (4, 5)),
    "abs": _unary(ad.abs, (3, 7)),
    "sqrt": _unary(ad.sqrt, (3, 7), low=0.5),
    "hinge": _unary(ad.hinge, (3, 7)),
    "attention": _attention,
    "triplet": _triplet,
}
SUITE = list(OP_ENTRIES) + ["model"]


def check_entry(name: str, precision: str = "double", seed: int = 0, num_samples: int = 50) -> GradCheckRow:
    if name not in SUITE:
        raise ValueError(f"unknown gradient-check entry {name!r}; choose from {', '.join(SUITE)}")
    settings = SETTINGS[precision]
    rng = np.random.default_rng([seed, SUITE.index(name)])
    with ad.precision(precision):
        build_loss, params = (_model if name == "model" else OP_ENTRIES[name])(rng)
        result = grad_check(
            build_loss,
            params,
            settings.step,
            settings.tol,
            num_samples=num_samples,
            seed=seed,
            floor=settings.floor,
            reference=settings.reference,
        )
    logger.info(
        "gradcheck %s (%s): max rel err %.3e over %d coords, %d skipped",
        name,
        precision,
        result.max_relative_error,
        result.checked,
        result.skipped,
    )
    return GradCheckRow(
        name=name,
        precision=precision,
        max_relative_error=result.max_relative_error,
        checked=result.checked,
        skipped=result.skipped,
        tolerance=result.tolerance,
        passed=result.passed,
    )


def run_suite(names: Optional[Sequence[str]] = None, precision: str = "double", seed: int = 0) -> List[GradCheckRow]:
    return [check_entry(name, precision, seed=seed) for name in (names or SUITE)]
