from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dfnlab.synth import SyntheticSpec

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


def tiny_spec(**overrides) -> SyntheticSpec:
    base = dict(
        num_concepts=8,
        d_latent=8,
        d_img=16,
        d_txt=12,
        align_prob=0.9,
        noise_sigma=0.1,
        seed=7,
        space_seed=99,
    )
    base.update(overrides)
    return SyntheticSpec(**base)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
