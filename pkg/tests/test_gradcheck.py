from __future__ import annotations

import numpy as np
import pytest

from app import autodiff as ad
from app.gradcheck import OP_ENTRIES, SETTINGS, SUITE, check_entry, grad_check, run_suite


@pytest.mark.parametrize("name", sorted(OP_ENTRIES))
def test_op_gradients_match_central_differences(name):
    row = check_entry(name, "double")
    assert row.checked > 0
    assert row.tolerance == pytest.approx(1e-6)
    assert row.passed, f"{name}: max relative error {row.max_relative_error:.3e}"


@pytest.mark.parametrize("name", sorted(OP_ENTRIES))
def test_op_gradients_single_precision(name):
    row = check_entry(name, "single")
    assert row.tolerance == pytest.approx(1e-3)
    assert row.passed, f"{name}: max relative error {row.max_relative_error:.3e}"


def test_settings_keep_the_strict_floor():
    assert SETTINGS["double"].floor == SETTINGS["single"].floor == 1e-8
    assert SETTINGS["double"].tol == 1e-6
    assert SETTINGS["single"].tol == 1e-3
    assert SETTINGS["single"].reference == "double"


def test_full_model_gradient_check_double():
    row = check_entry("model", "double")
    assert row.checked == 50
    assert row.max_relative_error < 1e-6


def test_full_model_gradient_check_single():
    row = check_entry("model", "single")
    assert row.checked == 50
    assert row.max_relative_error < 1e-3


def test_reference_precision_restores_parameters(rng):
    x = ad.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    before = x.data.copy()
    result = grad_check(lambda: ad.sum(ad.square(x)), [x], step=1e-5, tol=1e-3, reference="double")
    assert result.passed
    assert x.data.dtype == np.float32
    np.testing.assert_array_equal(x.data, before)
    assert x.grad is None


def test_suite_subset_and_unknown_names():
    rows = run_suite(["conv2d", "softmax"])
    assert [row.name for row in rows] == ["conv2d", "softmax"]
    assert SUITE[-1] == "model"
    with pytest.raises(ValueError):
        check_entry("no_such_op")
