import numpy as np
import pytest

import toy_oracle
from gputrack.model import Hyperparams, ObservationSet

TOY_HYPER = Hyperparams(alpha=1.0, rho=0.4, M=1, kappa0=0.5, nu0=4.0, q0=np.ones(2), aux_trials=1)
TOY_SLACK = 2


def toy_observations() -> ObservationSet:
    toy = toy_oracle.Toy()
    return ObservationSet(2, toy.frames, toy.pos, toy.counts)


@pytest.fixture(scope="session")
def toy_posterior():
    """(partition pmf, first-observation deletion pmf, final cluster-count pmf) by enumeration."""
    return toy_oracle.posterior()
