import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pseudobox.data_io import SynthConfig, synth_dataset

settings.register_profile("repo", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def small_world():
    """A 40-image shape world with two held-out categories and a test split."""
    cfg = SynthConfig(n_images=40, test_fraction=0.25, novel=["yellow circle", "magenta triangle"],
                      novel_in_train=False, seed=3)
    manifest, table, E = synth_dataset(cfg)
    return cfg, manifest, table, E


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
