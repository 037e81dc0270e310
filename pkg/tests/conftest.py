import numpy as np
import pytest

from sacn.graph import SplitSpec, make_split
from sacn.synth import generate_sbm


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def separable_bundle():
    """Two labeled nodes per class on a perfectly separable block model."""
    bundle = generate_sbm(n=60, k=3, p_in=1.0, p_out=0.0, m=12, feature_flip=0.0, seed=1)
    return make_split(bundle, SplitSpec(label_rate=0.1, val_size=9, test_size=30, seed=0))
