import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=300,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_cloud(rng, n, spread=(0.2, 0.8), scale=(0.05, 0.15), opacity=(0.2, 0.8)):
    from wildsplat.core import GaussianCloud, logit

    return GaussianCloud(
        positions=rng.uniform(*spread, (n, 2)),
        log_scales=np.log(rng.uniform(*scale, (n, 2))),
        rotations=rng.uniform(0, np.pi, n),
        opacity_logits=logit(rng.uniform(*opacity, n)),
        colors=rng.uniform(0.1, 0.9, (n, 3)),
        depths=rng.permutation(n).astype(float),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
