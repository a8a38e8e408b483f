from __future__ import annotations

import numpy as np
import pytest

from app import autodiff as ad
from app.models import ModelConfig, PhantomSpec
from app.phantom import generate_sample


@pytest.fixture(autouse=True)
def _isolated_env(tmp_path, monkeypatch):
    monkeypatch.setenv("TCTRANS_AUDIT_LOG", str(tmp_path / "audit.jsonl"))
    monkeypatch.setenv("TCTRANS_DEBUG_NUMERICS", "false")
    monkeypatch.setenv("TCTRANS_WORKERS", "2")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return PhantomSpec(size=(32, 32), n_oar=2, falloff_sigma=3.0, seed=7)


@pytest.fixture
def sample(small_spec):
    return generate_sample(small_spec, 0)


@pytest.fixture
def small_model_config(small_spec):
    return ModelConfig(
        in_channels=2 + small_spec.n_oar,
        base_width=4,
        num_enc_layers=3,
        num_transformer_layers=1,
        num_heads=4,
        input_size=small_spec.size,
        max_groups=4,
    )


@pytest.fixture
def double():
    with ad.precision("double"):
        yield
