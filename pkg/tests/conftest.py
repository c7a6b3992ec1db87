import numpy as np
import pytest

from msssa.linalg import build_tv_matrix
from msssa.solver import Problem
from msssa.synth import gen_dictionary


def random_problem(C, N, T, lambda1=0.1, lambda2=0.1, seed=0, tv=True, NP=None):
    """Unit-norm Gaussian dictionary and Gaussian signals."""
    rng = np.random.default_rng(seed)
    Phi = gen_dictionary(C, N, 1.0, rng)
    Y = rng.standard_normal((C, T))
    if tv:
        P = build_tv_matrix(T)
    else:
        P = rng.standard_normal((T, NP or T))
    return Problem(Y, Phi, P, lambda1, lambda2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
