"""Synthetic piecewise-constant decompositions on random dictionaries.

A dataset is a unit-norm Gaussian dictionary ``Phi`` (C x N) with bounded
coherence, coefficient matrices ``X`` (N x T) built from rectangular
activities on single atoms, and signals ``Y = Phi X + noise``.  All draws
come from ``numpy.random.default_rng`` (PCG64) seeded explicitly, so the
same seed gives the same bytes on every platform.
"""

import math
from dataclasses import dataclass
from typing import List

import numpy as np

from .errors import CoherenceInfeasibleError, InvalidArgumentError, InvalidDimensionError
from .linalg import as_matrix

__all__ = [
    "ActivitySpec",
    "SynthSpec",
    "coherence",
    "gen_dictionary",
    "gen_coefficients",
    "synthesize",
    "activity_window",
    "make_dataset",
]

MAX_ATTEMPTS = 1000


@dataclass(frozen=True)
class ActivitySpec:
    """One rectangular activity: weight `alpha` on row `atom` (0-based)
    around sample `center`, lasting the fraction `duration` of the signal."""

    atom: int
    center: float
    duration: float
    alpha: float

    def __post_init__(self):
        if not 0 < self.duration <= 1:
            raise InvalidArgumentError(f"duration must lie in (0, 1], got {self.duration}")
        if self.atom < 0:
            raise InvalidArgumentError(f"atom index must be non-negative, got {self.atom}")


@dataclass(frozen=True)
class SynthSpec:
    """Dataset shape and activity distribution.

    ``K`` signals of ``C`` channels and ``T`` samples on ``N_Phi`` atoms, each
    made of ``M`` activities with centres ``U(0, T)``, durations
    ``U(d_min, d_max)``, weights ``N(0, alpha_sigma^2)`` and atoms drawn
    uniformly with replacement.
    """

    C: int = 20
    T: int = 300
    N_Phi: int = 30
    K: int = 100
    M: int = 20
    d_min: float = 0.05
    d_max: float = 0.15
    alpha_sigma: float = 2.0
    noise_sigma: float = 0.0
    coherence_max: float = 0.35
    seed: int = 0

    def __post_init__(self):
        for name in ("C", "T", "N_Phi", "K"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgumentError(f"{name} must be at least 1")
        if self.M < 0:
            raise InvalidArgumentError("M must be non-negative")
        if not 0 < self.d_min <= self.d_max <= 1:
            raise InvalidArgumentError("durations need 0 < d_min <= d_max <= 1")
        if not 0 < self.coherence_max <= 1:
            raise InvalidArgumentError("coherence_max must lie in (0, 1]")
        if self.noise_sigma < 0 or self.alpha_sigma < 0:
            raise InvalidArgumentError("standard deviations must be non-negative")


def coherence(Phi):
    """Largest ``|Phi_i^T Phi_j|`` over distinct unit-norm columns."""
    Phi = np.asarray(Phi, dtype=float)
    if Phi.shape[1] < 2:
        return 0.0
    G = np.abs(Phi.T @ Phi)
    np.fill_diagonal(G, 0.0)
    return float(G.max())


def gen_dictionary(C, N_Phi, coherence_max=0.35, seed=0):
    """Random unit-norm Gaussian dictionary with bounded coherence.

    Columns are drawn one at a time; a column whose absolute inner product
    with an already accepted column exceeds `coherence_max` is redrawn, up to
    1000 times.

    Parameters
    ----------
    C, N_Phi : int
        Number of rows and atoms.
    coherence_max : float
        Bound on ``|Phi_i^T Phi_j|``, ``i != j``; 1 disables the check.
    seed : int or numpy.random.Generator

    Returns
    -------
    Phi : ndarray, shape (C, N_Phi)

    Raises
    ------
    CoherenceInfeasibleError
        When a column cannot be placed within the attempt budget.
    """
    if int(C) < 1 or int(N_Phi) < 1:
        raise InvalidDimensionError("dictionary needs at least one row and one atom")
    if not 0 < coherence_max <= 1:
        raise InvalidArgumentError("coherence_max must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    Phi = np.empty((int(C), int(N_Phi)))
    for j in range(int(N_Phi)):
        for _ in range(MAX_ATTEMPTS):
            v = rng.standard_normal(int(C))
            nv = np.linalg.norm(v)
            if nv == 0.0:
                continue
            v /= nv
            if j == 0 or np.max(np.abs(Phi[:, :j].T @ v)) <= coherence_max:
                break
        else:
            raise CoherenceInfeasibleError(
                f"could not place atom {j} with coherence <= {coherence_max} "
                f"after {MAX_ATTEMPTS} draws (C={C}, N_Phi={N_Phi})"
            )
        Phi[:, j] = v
    return Phi


def activity_window(center, duration, T):
    """Half-open column range ``[lo, hi)`` of an activity.

    The columns are the integers ``j`` with
    ``center - duration*T/2 <= j < center + duration*T/2``, clipped to
    ``[0, T)``.
    """
    half = 0.5 * duration * T
    lo = math.ceil(center - half)
    hi = math.ceil(center + half)
    return max(lo, 0), min(hi, T)


def place_activities(activities, N_Phi, T):
    """Sum the rectangular activities into an ``N_Phi x T`` matrix."""
    X = np.zeros((int(N_Phi), int(T)))
    for a in activities:
        if a.atom >= N_Phi:
            raise InvalidArgumentError(f"atom {a.atom} out of range for {N_Phi} atoms")
        lo, hi = activity_window(a.center, a.duration, T)
        if hi > lo:
            X[a.atom, lo:hi] += a.alpha
    return X


def gen_coefficients(spec, rng=None):
    """Draw one coefficient matrix.

    Parameters
    ----------
    spec : SynthSpec
    rng : numpy.random.Generator, optional
        Defaults to a generator seeded with ``spec.seed``.

    Returns
    -------
    X : ndarray, shape (N_Phi, T)
    activities : list of ActivitySpec
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    acts = []
    for _ in range(int(spec.M)):
        atom = int(rng.integers(spec.N_Phi))
        center = float(rng.uniform(0.0, spec.T))
        duration = float(rng.uniform(spec.d_min, spec.d_max))
        alpha = float(rng.normal(0.0, spec.alpha_sigma))
        acts.append(ActivitySpec(atom, center, duration, alpha))
    return place_activities(acts, spec.N_Phi, spec.T), acts


def synthesize(Phi, X, noise_sigma=0.0, seed=0):
    """``Y = Phi X + noise_sigma * E`` with standard Gaussian ``E``."""
    Phi = as_matrix(Phi, "Phi")
    X = as_matrix(X, "X")
    if Phi.shape[1] != X.shape[0]:
        raise InvalidDimensionError(
            f"Phi has {Phi.shape[1]} atoms but X has {X.shape[0]} rows"
        )
    if noise_sigma < 0:
        raise InvalidArgumentError("noise_sigma must be non-negative")
    Y = Phi @ X
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        Y = Y + noise_sigma * rng.standard_normal(Y.shape)
    return Y


@dataclass
class Dataset:
    Phi: np.ndarray
    X: List[np.ndarray]
    Y: List[np.ndarray]
    activities: List[List[ActivitySpec]]
    coherence: float


def make_dataset(spec):
    """Dictionary plus ``K`` coefficient/signal pairs, all derived from ``spec.seed``.

    Independent child seeds for the dictionary, the coefficients and the
    noise are spawned from one ``SeedSequence`` so that changing ``K`` does
    not change the dictionary.
    """
    ss = np.random.SeedSequence(spec.seed)
    s_dict, s_coef, s_noise = ss.spawn(3)
    Phi = gen_dictionary(spec.C, spec.N_Phi, spec.coherence_max, np.random.default_rng(s_dict))
    rng = np.random.default_rng(s_coef)
    noise_seeds = s_noise.spawn(int(spec.K))
    Xs, Ys, acts = [], [], []
    for k in range(int(spec.K)):
        X, a = gen_coefficients(spec, rng)
        Xs.append(X)
        acts.append(a)
        Ys.append(synthesize(Phi, X, spec.noise_sigma, np.random.default_rng(noise_seeds[k])))
    return Dataset(Phi, Xs, Ys, acts, coherence(Phi))
