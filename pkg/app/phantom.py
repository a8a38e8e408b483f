"""Synthetic pelvic phantoms with an analytic PTV-distance dose."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from app.errors import GeometryError
from app.models import PhantomSpec


logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 1000

# CT intensity offsets per organ (PTV first); femoral heads read bone-bright
_ORGAN_OFFSETS = {
    "ptv": 0.12,
    "small_intestine": -0.06,
    "femoral_head_r": 0.35,
    "femoral_head_l": 0.35,
    "bladder": 0.08,
    "rectum": -0.10,
}


@dataclass
class Sample:
    ct: np.ndarray
    ptv: np.ndarray
    oars: np.ndarray
    dose: np.ndarray
    name: str = ""

    @property
    def size(self) -> Tuple[int, int]:
        return self.ct.shape

    @property
    def n_oar(self) -> int:
        return self.oars.shape[0]

    def structures(self, organ_names: List[str]) -> Dict[str, np.ndarray]:
        masks = {"ptv": self.ptv > 0.5}
        for name, plane in zip(organ_names, self.oars):
            masks[name] = plane > 0.5
        return masks


def _ellipse(shape: Tuple[int, int], center: Tuple[float, float], axes: Tuple[float, float], angle: float) -> np.ndarray:
    rows, cols = np.mgrid[0 : shape[0], 0 : shape[1]]
    dy, dx = rows - center[0], cols - center[1]
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    u = dx * cos_a + dy * sin_a
    v = -dx * sin_a + dy * cos_a
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def _half_extents(axes: Tuple[float, float], angle: float) -> Tuple[float, float]:
    a, b = axes
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    half_w = math.sqrt((a * cos_a) ** 2 + (b * sin_a) ** 2)
    half_h = math.sqrt((a * sin_a) ** 2 + (b * cos_a) ** 2)
    return half_h, half_w


def _sample_ptv(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    height, width = spec.size
    side = min(height, width)
    border = 2.0 * spec.falloff_sigma
    for _ in range(MAX_ATTEMPTS):
        axes = tuple(rng.uniform(*spec.ptv_axes, size=2) * side)
        angle = rng.uniform(0.0, math.pi)
        half_h, half_w = _half_extents(axes, angle)
        low_r, high_r = half_h + border, height - 1 - half_h - border
        low_c, high_c = half_w + border, width - 1 - half_w - border
        if low_r > high_r or low_c > high_c:
            continue
        center = (rng.uniform(low_r, high_r), rng.uniform(low_c, high_c))
        mask = _ellipse(spec.size, center, axes, angle)
        if mask.any():
            return mask
    raise GeometryError(f"could not place a PTV in {spec.size} after {MAX_ATTEMPTS} attempts")


def _sample_oar(spec: PhantomSpec, ptv: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    height, width = spec.size
    side = min(height, width)
    for _ in range(MAX_ATTEMPTS):
        axes = tuple(rng.uniform(*spec.oar_axes, size=2) * side)
        angle = rng.uniform(0.0, math.pi)
        center = (rng.uniform(0, height - 1), rng.uniform(0, width - 1))
        mask = _ellipse(spec.size, center, axes, angle)
        if mask.any() and not (mask & ptv).any():
            return mask
    raise GeometryError(f"could not place an OAR clear of the PTV after {MAX_ATTEMPTS} attempts")


def distance_to_set(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from every pixel to the nearest set pixel (0 inside)."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ValueError("distance_to_set requires at least one set pixel")
    return distance_transform_edt(~mask)


def analytic_dose(ptv: np.ndarray, sigma: float) -> np.ndarray:
    dist = distance_to_set(ptv)
    dose = np.exp(-(dist**2) / (2.0 * sigma**2))
    dose[ptv] = 1.0
    return dose


def _ct_plane(spec: PhantomSpec, ptv: np.ndarray, oars: List[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    height, width = spec.size
    background = gaussian_filter(rng.normal(size=spec.size), sigma=min(height, width) / 8.0, mode="wrap")
    span = np.ptp(background)
    background = (background - background.min()) / (span if span > 0 else 1.0)
    ct = 0.3 + 0.2 * background
    ct = ct + _ORGAN_OFFSETS["ptv"] * ptv
    for name, mask in zip(spec.organ_names, oars):
        ct = ct + _ORGAN_OFFSETS.get(name, 0.05) * mask
    ct = ct + spec.noise_std * rng.normal(size=spec.size)
    return np.clip(ct, 0.0, 1.0)


def generate_sample(spec: PhantomSpec, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    ptv = _sample_ptv(spec, rng)
    oars = [_sample_oar(spec, ptv, rng) for _ in range(spec.n_oar)]
    dose = analytic_dose(ptv, spec.falloff_sigma)
    ct = _ct_plane(spec, ptv, oars, rng)
    oar_stack = np.stack(oars).astype(np.float32) if oars else np.zeros((0, *spec.size), dtype=np.float32)
    return Sample(
        ct=ct.astype(np.float32),
        ptv=ptv.astype(np.float32),
        oars=oar_stack,
        dose=dose.astype(np.float32),
        name=f"sample_{index:04d}",
    )


def split_indices(count: int, seed: int) -> Dict[int, str]:
    """Assign indices to train/val/test in the 28/2/12 ratio, deterministic in seed."""
    if count <= 0:
        return {}
    n_test = int(round(count * 12 / 42))
    n_val = int(round(count * 2 / 42))
    n_train = count - n_test - n_val
    if n_train < 1:
        n_train, n_val, n_test = 1, 0, count - 1
    order = np.random.default_rng(seed).permutation(count)
    labels: Dict[int, str] = {}
    for rank, index in enumerate(order):
        if rank < n_train:
            labels[int(index)] = "train"
        elif rank < n_train + n_val:
            labels[int(index)] = "val"
        else:
            labels[int(index)] = "test"
    return labels
