from __future__ import annotations

import math

import numpy as np
import pytest
from pydantic import ValidationError

from app.models import PhantomSpec, oar_names
from app.phantom import analytic_dose, distance_to_set, generate_sample, split_indices


def _brute_force_distance(mask):
    points = np.argwhere(mask)
    rows, cols = np.mgrid[0 : mask.shape[0], 0 : mask.shape[1]]
    out = np.full(mask.shape, np.inf)
    for r, c in points:
        out = np.minimum(out, np.sqrt((rows - r) ** 2 + (cols - c) ** 2))
    return out


def test_distance_to_set_neighbours():
    mask = np.zeros((5, 5), dtype=bool)
    mask[2, 2] = True
    dist = distance_to_set(mask)
    assert dist[2, 2] == 0.0
    assert dist[2, 3] == 1.0
    assert dist[3, 3] == pytest.approx(math.sqrt(2))


def test_distance_to_set_matches_brute_force(rng):
    mask = rng.uniform(size=(32, 32)) > 0.97
    mask[0, 0] = True
    np.testing.assert_allclose(distance_to_set(mask), _brute_force_distance(mask), atol=1e-12)


def test_distance_to_set_rejects_empty_mask():
    with pytest.raises(ValueError):
        distance_to_set(np.zeros((4, 4)))


def test_analytic_dose_falloff():
    ptv = np.zeros((16, 16), dtype=bool)
    ptv[:, :4] = True
    dose = analytic_dose(ptv, sigma=3.0)
    assert np.all(dose[ptv] == 1.0)
    # column 3 is the last PTV column, so column 6 sits 3 px away
    assert dose[8, 6] == pytest.approx(math.exp(-0.5))
    assert np.all(np.diff(dose[8, 3:]) < 0)


def test_sample_invariants(small_spec):
    sample = generate_sample(small_spec, 3)
    assert sample.size == (32, 32)
    assert sample.n_oar == 2
    for plane in (sample.ptv, *sample.oars):
        assert set(np.unique(plane)) <= {0.0, 1.0}
    assert not np.any((sample.ptv > 0.5) & (sample.oars.max(axis=0) > 0.5))
    assert np.all((sample.dose >= 0.0) & (sample.dose <= 1.0))
    assert np.all(sample.dose[sample.ptv > 0.5] == 1.0)
    assert np.all((sample.ct >= 0.0) & (sample.ct <= 1.0))
    assert sample.name == "sample_0003"


def test_dose_decreases_with_distance_from_ptv(sample):
    dist = distance_to_set(sample.ptv > 0.5)
    outside = dist > 0
    order = np.argsort(dist[outside], kind="stable")
    d = dist[outside][order]
    dose = sample.dose[outside][order].astype(np.float64)
    farther = np.diff(d) > 1e-9
    assert np.all(np.diff(dose)[farther] <= 0)


def test_generation_is_deterministic(small_spec):
    a = generate_sample(small_spec, 5)
    b = generate_sample(small_spec, 5)
    for field in ("ct", "ptv", "oars", "dose"):
        assert np.array_equal(getattr(a, field), getattr(b, field))
    assert not np.array_equal(a.ct, generate_sample(small_spec, 6).ct)


def test_structures_are_named(sample, small_spec):
    structures = sample.structures(small_spec.organ_names)
    assert list(structures) == ["ptv", "small_intestine", "femoral_head_r"]
    assert oar_names(7)[-2:] == ["oar_6", "oar_7"]


def test_phantom_spec_rejects_unsatisfiable_geometry():
    with pytest.raises(ValidationError):
        PhantomSpec(size=(16, 16), falloff_sigma=4.0)
    with pytest.raises(ValidationError):
        PhantomSpec(size=(4, 4))


def test_split_indices_ratio():
    labels = split_indices(42, seed=0)
    counts = {name: list(labels.values()).count(name) for name in ("train", "val", "test")}
    assert counts == {"train": 28, "val": 2, "test": 12}
    assert split_indices(42, seed=0) == labels
    assert split_indices(0, seed=0) == {}
    assert list(split_indices(1, seed=0).values()) == ["train"]
