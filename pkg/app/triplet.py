"""PTV-guided triplet constraint on decoder features and its multi-scale sum.

The PTV mask is tiled into S x S patches from (0, 0); a patch straddling the PTV
boundary is a margin patch. Its centre pixel is the anchor, pixels on the anchor's
side of the boundary are positives and pixels on the other side are negatives.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from app import autodiff as ad
from app.autodiff import Tensor
from app.errors import ShapeError


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MarginPatch:
    origin: Tuple[int, int]
    anchor: Tuple[int, int]
    anchor_inside: bool
    positives: np.ndarray
    negatives: np.ndarray


@dataclass
class MarginPatchSet:
    patch_size: int
    total_patches: int
    shape: Tuple[int, int]
    patches: List[MarginPatch] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.patches)

    def anchor_index(self, patch: MarginPatch) -> int:
        return patch.anchor[0] * self.shape[1] + patch.anchor[1]


def margin_patches(ptv_mask: np.ndarray, S: int) -> MarginPatchSet:
    mask = np.asarray(ptv_mask)
    if mask.ndim != 2:
        raise ShapeError("margin_patches", "mask must be a 2-D plane", [mask.shape])
    if S < 1 or S % 2 == 0:
        raise ValueError(f"patch size S must be a positive odd number, got {S}")
    height, width = mask.shape
    if S > min(height, width):
        raise ValueError(f"patch size {S} exceeds the {height}x{width} plane")
    mask = mask > 0.5
    half = S // 2
    offsets_r, offsets_c = np.mgrid[0:S, 0:S]
    centre = np.zeros((S, S), dtype=bool)
    centre[half, half] = True

    patch_set = MarginPatchSet(patch_size=S, total_patches=(height // S) * (width // S), shape=(height, width))
    for row in range(0, (height // S) * S, S):
        for col in range(0, (width // S) * S, S):
            tile = mask[row : row + S, col : col + S]
            if tile.all() or not tile.any():
                continue
            inside = bool(tile[half, half])
            flat = (offsets_r + row) * width + (offsets_c + col)
            same_side = (tile == inside) & ~centre
            patch_set.patches.append(
                MarginPatch(
                    origin=(row, col),
                    anchor=(row + half, col + half),
                    anchor_inside=inside,
                    positives=flat[same_side],
                    negatives=flat[tile != inside],
                )
            )
    return patch_set


@dataclass
class ScaleTerm:
    """L_tp at one scale plus the per-patch quantities behind it."""

    scale: int
    loss: Tensor
    patch_set: MarginPatchSet
    d_plus: np.ndarray
    d_minus: np.ndarray
    per_patch: np.ndarray

    @property
    def separation(self) -> float:
        if self.patch_set.count == 0:
            return float("nan")
        return float(np.mean(self.d_minus - self.d_plus))


def _feature_matrix(f: Tensor, shape: Tuple[int, int]) -> Tensor:
    if f.ndim != 4 or f.shape[0] != 1:
        raise ShapeError("triplet", "features must be [1,C,h,w]", [f.shape])
    if tuple(f.shape[2:]) != tuple(shape):
        raise ShapeError("triplet", "feature map and mask are not aligned", [f.shape, shape])
    return ad.reshape(f, (f.shape[1], shape[0] * shape[1]))


def _patch_distances(f: Tensor, patch_set: MarginPatchSet) -> Tuple[Tensor, Tensor]:
    """Mean anchor-positive and anchor-negative distances, one entry per margin patch."""
    width = patch_set.patch_size**2 - 1
    anchors, others = [], []
    plus_weights = np.zeros((patch_set.count, width))
    minus_weights = np.zeros((patch_set.count, width))
    for index, patch in enumerate(patch_set.patches):
        n_pos = len(patch.positives)
        anchors.append(np.full(width, patch_set.anchor_index(patch)))
        others.append(np.concatenate([patch.positives, patch.negatives]))
        # an anchor can be the only pixel on its side; d_plus is then 0
        if n_pos:
            plus_weights[index, :n_pos] = 1.0 / n_pos
        minus_weights[index, n_pos:] = 1.0 / (width - n_pos)

    features = _feature_matrix(f, patch_set.shape)
    at_anchor = ad.index_select(features, np.concatenate(anchors), axis=1)
    at_other = ad.index_select(features, np.concatenate(others), axis=1)
    dist = ad.sqrt(ad.sum(ad.square(ad.sub(at_other, at_anchor)), axis=0))
    dist = ad.reshape(dist, (patch_set.count, width))
    dtype = f.data.dtype
    d_plus = ad.sum(ad.mul(dist, Tensor(plus_weights.astype(dtype))), axis=1)
    d_minus = ad.sum(ad.mul(dist, Tensor(minus_weights.astype(dtype))), axis=1)
    return d_plus, d_minus


def anchor_distances(f: Tensor, patch: MarginPatch) -> Tuple[Tensor, Tensor]:
    S = int(math.isqrt(len(patch.positives) + len(patch.negatives) + 1))
    single = MarginPatchSet(patch_size=S, total_patches=1, shape=(f.shape[2], f.shape[3]), patches=[patch])
    d_plus, d_minus = _patch_distances(f, single)
    return ad.reshape(d_plus, ()), ad.reshape(d_minus, ())


def inner_patch_loss(d_plus: Tensor, d_minus: Tensor, m: float) -> Tensor:
    if m < 0:
        raise ValueError(f"margin must be non-negative, got {m}")
    margin = Tensor(np.asarray(m, dtype=d_plus.data.dtype))
    return ad.hinge(ad.sub(ad.add(d_plus, margin), d_minus))


def scale_term(f: Tensor, ptv_mask: np.ndarray, S: int, m: float, normalize: bool = False, scale: int = 1) -> ScaleTerm:
    patch_set = margin_patches(ptv_mask, S)
    _feature_matrix(f, patch_set.shape)
    if patch_set.count == 0:
        zero = Tensor(np.zeros((), dtype=f.data.dtype))
        empty = np.zeros(0)
        return ScaleTerm(scale=scale, loss=zero, patch_set=patch_set, d_plus=empty, d_minus=empty, per_patch=empty)
    d_plus, d_minus = _patch_distances(f, patch_set)
    per_patch = inner_patch_loss(d_plus, d_minus, m)
    divisor = patch_set.count if normalize else S * S
    loss = ad.scale(ad.sum(per_patch), 1.0 / divisor)
    return ScaleTerm(
        scale=scale,
        loss=loss,
        patch_set=patch_set,
        d_plus=d_plus.data.astype(np.float64),
        d_minus=d_minus.data.astype(np.float64),
        per_patch=per_patch.data.astype(np.float64),
    )


def triplet_constraint_loss(f: Tensor, ptv_mask_at_scale: np.ndarray, S: int, m: float, normalize: bool = False) -> Tensor:
    """L_tp = sum of hinge losses over margin patches / (S*S); zero when there are none."""
    return scale_term(f, ptv_mask_at_scale, S, m, normalize=normalize).loss


def downsample_mask(mask: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    height, width = mask.shape
    if height % shape[0] or width % shape[1] or height // shape[0] != width // shape[1]:
        raise ShapeError("downsample_mask", "scale is not an integer factor of the mask", [mask.shape, shape])
    factor = height // shape[0]
    return mask[::factor, ::factor]


def multiscale_terms(
    features: Sequence[Tensor], ptv_mask: np.ndarray, S: int, m: float, normalize: bool = False
) -> List[ScaleTerm]:
    """Per-scale terms; feature r of R must be deepest first at (H, W) / 2^(R - r)."""
    mask = np.asarray(ptv_mask)
    height, width = mask.shape
    count = len(features)
    terms = []
    for r, f in enumerate(features, start=1):
        factor = 2 ** (count - r)
        expected = (height // factor, width // factor)
        if height % factor or width % factor or tuple(f.shape[2:]) != expected:
            raise ShapeError(
                "multiscale_triplet_loss",
                f"feature {r} of {count} must be {expected[0]}x{expected[1]} (deepest first)",
                [mask.shape, f.shape],
            )
        scaled = downsample_mask(mask, expected)
        terms.append(scale_term(f, scaled, S, m, normalize=normalize, scale=r))
    return terms


def sum_terms(terms: Sequence[ScaleTerm]) -> Tensor:
    total = terms[0].loss
    for term in terms[1:]:
        total = ad.add(total, term.loss)
    return total


def multiscale_triplet_loss(
    features: Sequence[Tensor], ptv_mask: np.ndarray, S: int, m: float, normalize: bool = False
) -> Tensor:
    """L_mtp: per-scale L_tp summed over decoder features ordered deepest first."""
    if not features:
        raise ShapeError("multiscale_triplet_loss", "no feature maps given")
    return sum_terms(multiscale_terms(features, ptv_mask, S, m, normalize=normalize))


@dataclass
class TripletDiagnostics:
    terms: List[ScaleTerm]

    @property
    def l_mtp(self) -> float:
        return float(sum(term.loss.item() for term in self.terms))

    @property
    def per_scale(self) -> Dict[int, float]:
        return {term.scale: term.loss.item() for term in self.terms}

    @property
    def separations(self) -> List[float]:
        return [term.separation for term in self.terms]

    def rows(self) -> List[Dict[str, object]]:
        rows: List[Dict[str, object]] = []
        for term in self.terms:
            for index, patch in enumerate(term.patch_set.patches):
                rows.append(
                    {
                        "scale": term.scale,
                        "origin_row": patch.origin[0],
                        "origin_col": patch.origin[1],
                        "anchor_inside": int(patch.anchor_inside),
                        "d_plus": float(term.d_plus[index]),
                        "d_minus": float(term.d_minus[index]),
                        "L_i": float(term.per_patch[index]),
                    }
                )
        return rows


DIAGNOSTIC_COLUMNS = ["scale", "origin_row", "origin_col", "anchor_inside", "d_plus", "d_minus", "L_i"]
