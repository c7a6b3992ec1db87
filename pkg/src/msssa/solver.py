"""Split Bregman solver for structured sparse decomposition.

Solves

.. math::
   \\min_X \\|Y - \\Phi X\\|_2^2 + \\lambda_1 \\|X\\|_1 + \\lambda_2 \\|X P\\|_1

for multi-channel signals ``Y`` (C x T) on a dictionary ``Phi`` (C x N)
with an analysis operator ``P`` (T x N_P).  The splitting ``A = X``,
``B = X P`` turns every iteration into one Sylvester solve for ``X``
followed by two soft-thresholds and two dual updates.  Because
``W = 2 Phi^T Phi + mu1 I`` and ``Z = mu2 P P^T`` are symmetric, the Sylvester
solve reduces to an element-wise division in fixed eigenbases, and changing
the penalties only changes the divisor grid.
"""

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import (
    DivergenceError,
    HeuristicFailureError,
    IllConditionedError,
    InvalidArgumentError,
    InvalidDimensionError,
)
from .linalg import (
    DEFAULT_O_FLOOR,
    SymEig,
    as_matrix,
    build_tv_matrix,
    check_divisor_grid,
    divisor_grid,
    sym_eigendecompose,
)

log = logging.getLogger(__name__)

ATOM_NORM_TOL = 1e-8


ZERO_LEVEL = 1e-14


def default_mu_grid(size=20, low=1e-3, high=1e3):
    """Logarithmic search grid for the penalty initialization heuristic."""
    return tuple(np.logspace(np.log10(low), np.log10(high), size).tolist())


@dataclass(frozen=True)
class Problem:
    """Signals, dictionary, analysis operator and regularization weights."""

    Y: np.ndarray
    Phi: np.ndarray
    P: np.ndarray
    lambda1: float = 0.0
    lambda2: float = 0.0
    check_atoms: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        Y = as_matrix(self.Y, "Y")
        Phi = as_matrix(self.Phi, "Phi")
        P = as_matrix(self.P, "P")
        if Y.shape[0] != Phi.shape[0]:
            raise InvalidDimensionError(
                f"Y has {Y.shape[0]} channels but Phi has {Phi.shape[0]} rows"
            )
        if Y.shape[1] != P.shape[0]:
            raise InvalidDimensionError(
                f"Y has {Y.shape[1]} samples but P has {P.shape[0]} rows"
            )
        if not (self.lambda1 >= 0 and self.lambda2 >= 0):
            raise InvalidArgumentError("regularization weights must be non-negative")
        if self.check_atoms:
            norms = np.linalg.norm(Phi, axis=0)
            if np.max(np.abs(norms - 1.0), initial=0.0) > ATOM_NORM_TOL:
                raise InvalidArgumentError("dictionary atoms must have unit Euclidean norm")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "Phi", Phi)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "lambda1", float(self.lambda1))
        object.__setattr__(self, "lambda2", float(self.lambda2))

    @classmethod
    def fused_lasso(cls, Y, Phi, lambda1=0.0, lambda2=0.0, **kwargs):
        """Problem with the first-difference (total variation) operator."""
        Y = np.asarray(Y, dtype=float)
        return cls(Y, Phi, build_tv_matrix(Y.shape[1]), lambda1, lambda2, **kwargs)

    @property
    def n_atoms(self):
        return self.Phi.shape[1]

    @property
    def n_samples(self):
        return self.Y.shape[1]

    @property
    def n_filters(self):
        return self.P.shape[1]

    def with_weights(self, lambda1, lambda2):
        return dataclasses.replace(self, lambda1=lambda1, lambda2=lambda2, check_atoms=False)

    def with_signals(self, Y):
        return dataclasses.replace(self, Y=Y, check_atoms=False)


@dataclass(frozen=True)
class SolverConfig:
    """Iteration control for :func:`solve`.

    ``eps`` is the relative-change tolerance ``|X^i - X^{i-1}| / |X^i|``.
    ``r1, r2`` and ``rho1, rho2`` drive the penalty schedule: a penalty is
    multiplied by ``rho`` whenever its constraint loss fails to shrink by a
    factor ``r``.  ``mu1``/``mu2`` bypass the grid heuristic when given.
    With ``balance_residuals`` a stalled penalty is only raised while its
    constraint loss is at least the matching dual residual
    ``mu * |A^i - A^{i-1}|`` (resp. ``B``); without it the penalties keep
    growing on problems whose residuals shrink slower than ``r`` per
    iteration and the iterates freeze before reaching the optimum.
    ``rescale_duals`` keeps the unscaled multipliers ``mu * D`` fixed when a
    penalty changes.
    ``target_loss``/``target_precision`` add a second stopping rule,
    ``|E(X^i) - target_loss| / target_loss < target_precision``, used by the
    speed benchmarks.  ``time_limit`` (seconds of iteration time) ends the
    run with reason ``"time_limit"``.
    """

    eps: float = 1e-6
    iter_max: int = 10000
    r1: float = 0.95
    r2: float = 0.95
    rho1: float = 1.05
    rho2: float = 1.05
    mu_grid: Tuple[float, ...] = field(default_factory=default_mu_grid)
    o_floor: float = DEFAULT_O_FLOOR
    record_trace: bool = False
    mu1: Optional[float] = None
    mu2: Optional[float] = None
    target_loss: Optional[float] = None
    target_precision: Optional[float] = None
    balance_residuals: bool = True
    rescale_duals: bool = True
    time_limit: Optional[float] = None

    def __post_init__(self):
        if not self.eps > 0:
            raise InvalidArgumentError("eps must be positive")
        if int(self.iter_max) < 1:
            raise InvalidArgumentError("iter_max must be at least 1")
        if not (0 < self.r1 < 1 and 0 < self.r2 < 1):
            raise InvalidArgumentError("r1 and r2 must lie in (0, 1)")
        if not (self.rho1 > 1 and self.rho2 > 1):
            raise InvalidArgumentError("rho1 and rho2 must exceed 1")
        if not self.o_floor > 0:
            raise InvalidArgumentError("o_floor must be positive")
        grid = tuple(sorted(float(g) for g in self.mu_grid))
        if any(not g > 0 for g in grid):
            raise InvalidArgumentError("mu_grid entries must be positive")
        object.__setattr__(self, "mu_grid", grid)
        object.__setattr__(self, "iter_max", int(self.iter_max))
        for name in ("mu1", "mu2"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if (self.target_loss is None) != (self.target_precision is None):
            raise InvalidArgumentError("target_loss and target_precision go together")


@dataclass(frozen=True)
class OperatorBases:
    """Eigendecompositions of ``2 Phi^T Phi`` and ``P P^T``.

    They depend on the dictionary and analysis operator only, so a family of
    problems sharing ``Phi`` and ``P`` can reuse them.
    """

    eig_w: SymEig
    eig_z: SymEig


@dataclass(frozen=True)
class Factorization:
    """Precomputed quantities for the diagonalized X update."""

    F: np.ndarray
    G: np.ndarray
    delta_w: np.ndarray
    delta_z: np.ndarray
    Dw: np.ndarray
    Dz: np.ndarray
    O: np.ndarray
    Y_Phi: np.ndarray
    P_G: np.ndarray
    mu1: float
    mu2: float
    o_floor: float = DEFAULT_O_FLOOR


@dataclass(frozen=True)
class SolverState:
    """Primal, auxiliary and (scaled) dual iterates.

    ``XP`` caches ``X @ P`` from the last X update; ``a_change`` and
    ``b_change`` are ``|A^i - A^{i-1}|`` and ``|B^i - B^{i-1}|``.  ``h1_prev``
    and ``h2_prev`` are ``None`` until one iteration has been performed.
    """

    X: np.ndarray
    A: np.ndarray
    B: np.ndarray
    DA: np.ndarray
    DB: np.ndarray
    mu1: float
    mu2: float
    XP: np.ndarray
    iter: int = 0
    h1_prev: Optional[float] = None
    h2_prev: Optional[float] = None
    a_change: float = 0.0
    b_change: float = 0.0

    @property
    def h1(self):
        return float(np.linalg.norm(self.X - self.A))

    @property
    def h2(self):
        return float(np.linalg.norm(self.XP - self.B))


@dataclass
class SolveReport:
    X_hat: np.ndarray
    iterations: int
    objective: float
    objective_trace: List[float]
    final_residuals: Tuple[float, float]
    converged: bool
    wall_time: float
    precompute_time: float
    mu_initial: Tuple[float, float]
    mu_final: Tuple[float, float]
    stop_reason: str = ""

    def to_dict(self, include_trace=True):
        out = {
            "iterations": self.iterations,
            "objective": self.objective,
            "final_residuals": list(self.final_residuals),
            "converged": self.converged,
            "stop_reason": self.stop_reason,
            "wall_time": self.wall_time,
            "precompute_time": self.precompute_time,
            "mu_initial": list(self.mu_initial),
            "mu_final": list(self.mu_final),
        }
        if include_trace:
            out["objective_trace"] = list(self.objective_trace)
        return out


def objective(X, prob):
    """``|Y - Phi X|_2^2 + lambda1 |X|_1 + lambda2 |X P|_1`` (entry-wise norms)."""
    X = np.asarray(X, dtype=float)
    if X.shape != (prob.n_atoms, prob.n_samples):
        raise InvalidDimensionError(
            f"X has shape {X.shape}, expected {(prob.n_atoms, prob.n_samples)}"
        )
    R = prob.Y - prob.Phi @ X
    val = float(np.sum(R * R))
    if prob.lambda1:
        val += prob.lambda1 * float(np.sum(np.abs(X)))
    if prob.lambda2:
        val += prob.lambda2 * float(np.sum(np.abs(X @ prob.P)))
    return val


def soft_threshold(M, tau):
    """Entry-wise ``max(0, 1 - tau/|m|) * m``, with zero mapped to zero."""
    if not tau >= 0:
        raise InvalidArgumentError(f"threshold must be non-negative, got {tau}")
    M = np.asarray(M, dtype=float)
    if tau == 0:
        return M.copy()
    return np.sign(M) * np.maximum(np.abs(M) - tau, 0.0)


def operator_bases(Phi, P):
    """Diagonalize ``2 Phi^T Phi`` and ``P P^T``."""
    Phi = np.asarray(Phi, dtype=float)
    P = np.asarray(P, dtype=float)
    return OperatorBases(sym_eigendecompose(2.0 * (Phi.T @ Phi)), sym_eigendecompose(P @ P.T))


def _shifts(delta_w, delta_z, mu1, mu2, o_floor):
    Dw = delta_w + mu1
    Dz = mu2 * delta_z
    O = divisor_grid(Dw, Dz)
    try:
        check_divisor_grid(O, o_floor)
    except IllConditionedError as exc:
        omin = float(delta_w.min() + mu1 + mu2 * delta_z.min())
        raise IllConditionedError(
            f"min O = min(delta_w) + mu1 + mu2 * min(delta_z) = {omin:.3e} "
            f"is below the floor {o_floor:.1e} (mu1={mu1:.3e}, mu2={mu2:.3e})",
            min_value=omin,
            index=exc.index,
        ) from None
    return Dw, Dz, O


def precompute(prob, mu1, mu2, o_floor=DEFAULT_O_FLOOR, bases=None):
    """Build the :class:`Factorization` for penalties ``mu1``, ``mu2``.

    ``bases`` may carry eigendecompositions computed earlier for the same
    ``Phi`` and ``P``.
    """
    if not (mu1 > 0 and mu2 > 0):
        raise InvalidArgumentError("penalties must be positive")
    if bases is None:
        bases = operator_bases(prob.Phi, prob.P)
    F, delta_w = bases.eig_w
    G, delta_z = bases.eig_z
    if F.shape[0] != prob.n_atoms or G.shape[0] != prob.n_samples:
        raise InvalidDimensionError("eigenbases do not match the problem dimensions")
    Dw, Dz, O = _shifts(delta_w, delta_z, mu1, mu2, o_floor)
    Y_Phi = 2.0 * (F.T @ (prob.Phi.T @ prob.Y) @ G)
    P_G = prob.P.T @ G
    return Factorization(F, G, delta_w, delta_z, Dw, Dz, O, Y_Phi, P_G, float(mu1), float(mu2), o_floor)


def refresh_shifts(fact, mu1, mu2):
    """Recompute ``Dw``, ``Dz`` and ``O`` for new penalties, reusing the bases."""
    if not (mu1 > 0 and mu2 > 0):
        raise InvalidArgumentError("penalties must be positive")
    Dw, Dz, O = _shifts(fact.delta_w, fact.delta_z, mu1, mu2, fact.o_floor)
    return dataclasses.replace(fact, Dw=Dw, Dz=Dz, O=O, mu1=float(mu1), mu2=float(mu2))


def initial_state(prob, mu1, mu2):
    """``X = A = D_A = 0`` and ``B = X P = D_B = 0``."""
    N, T, NP = prob.n_atoms, prob.n_samples, prob.n_filters
    return SolverState(
        X=np.zeros((N, T)),
        A=np.zeros((N, T)),
        B=np.zeros((N, NP)),
        DA=np.zeros((N, T)),
        DB=np.zeros((N, NP)),
        mu1=float(mu1),
        mu2=float(mu2),
        XP=np.zeros((N, NP)),
    )


def bregman_iterate(state, fact, prob):
    """One split Bregman iteration: X, A, B primal updates then both duals."""
    if state.mu1 != fact.mu1 or state.mu2 != fact.mu2:
        raise InvalidArgumentError("factorization was built for different penalties")
    mu1, mu2 = state.mu1, state.mu2
    F, G, P_G = fact.F, fact.G, fact.P_G

    RB = state.DB - state.B
    # cheaper association of F^T (D_B - B) P_G depends on T vs N_P
    if prob.n_samples >= prob.n_filters:
        chain_b = F.T @ (RB @ P_G)
    else:
        chain_b = (F.T @ RB) @ P_G
    Mp = fact.Y_Phi - (mu1 * (F.T @ (state.DA - state.A) @ G) + mu2 * chain_b)
    X = F @ (Mp / fact.O) @ G.T
    XP = X @ prob.P

    VA = X + state.DA
    VB = XP + state.DB
    A = soft_threshold(VA, prob.lambda1 / mu1)
    B = soft_threshold(VB, prob.lambda2 / mu2)
    # D + (X - A) written as (X + D) - A, which is exactly zero when nothing is thresholded
    DA = VA - A
    DB = VB - B
    return dataclasses.replace(
        state,
        X=X, A=A, B=B, DA=DA, DB=DB, XP=XP,
        iter=state.iter + 1,
        a_change=float(np.linalg.norm(A - state.A)),
        b_change=float(np.linalg.norm(B - state.B)),
    )


def _stalled(h, h_prev, r, scale):
    # a constraint already met to rounding precision never forces an increase
    if h <= 16 * np.finfo(float).eps * scale:
        return False
    return not h < r * h_prev


def update_penalties(state, cfg):
    """Geometric penalty schedule.

    ``mu1`` is multiplied by ``rho1`` unless ``|X - A|`` dropped below
    ``r1`` times its previous value (likewise ``mu2`` with ``|XP - B|``).
    See :class:`SolverConfig` for the residual-balancing guard and the dual
    rescaling.  On the first call only the constraint losses are recorded.
    The caller must call :func:`refresh_shifts` when a penalty changed.
    """
    h1, h2 = state.h1, state.h2
    mu1, mu2 = state.mu1, state.mu2
    DA, DB = state.DA, state.DB
    if state.h1_prev is not None:
        grow1 = _stalled(h1, state.h1_prev, cfg.r1, float(np.linalg.norm(state.X)))
        grow2 = _stalled(h2, state.h2_prev, cfg.r2, float(np.linalg.norm(state.XP)))
        if cfg.balance_residuals:
            grow1 = grow1 and h1 >= mu1 * state.a_change
            grow2 = grow2 and h2 >= mu2 * state.b_change
        if grow1:
            mu1 = cfg.rho1 * mu1
            if cfg.rescale_duals:
                DA = DA / cfg.rho1
        if grow2:
            mu2 = cfg.rho2 * mu2
            if cfg.rescale_duals:
                DB = DB / cfg.rho2
    return dataclasses.replace(state, mu1=mu1, mu2=mu2, DA=DA, DB=DB, h1_prev=h1, h2_prev=h2)


def init_penalties(prob, cfg, bases=None):
    """Pick ``(mu1, mu2)`` from ``cfg.mu_grid`` by the one-iteration heuristic.

    For every grid pair one iteration is run from the zero state and the
    constraint energies ``t1 = mu1/2 |X - A|^2`` and ``t2 = mu2/2 |XP - B|^2``
    are recorded.  ``mu1`` maximizes ``t1`` summed over the ``mu2`` axis and
    ``mu2`` maximizes ``t2`` summed over the ``mu1`` axis.  Ties go to the
    smaller grid value.  Ill-conditioned pairs are left out of the sums.
    """
    grid = np.asarray(cfg.mu_grid, dtype=float)
    if grid.size == 0:
        raise InvalidArgumentError("mu_grid is empty")
    if grid.size == 1:
        return float(grid[0]), float(grid[0])
    if bases is None:
        bases = operator_bases(prob.Phi, prob.P)
    t1 = np.full((grid.size, grid.size), np.nan)
    t2 = np.full((grid.size, grid.size), np.nan)
    fact = None
    for j, g1 in enumerate(grid):
        for l, g2 in enumerate(grid):
            try:
                if fact is None:
                    fact = precompute(prob, g1, g2, cfg.o_floor, bases)
                else:
                    fact = refresh_shifts(fact, g1, g2)
            except IllConditionedError:
                continue
            s = bregman_iterate(initial_state(prob, g1, g2), fact, prob)
            t1[j, l] = 0.5 * g1 * s.h1 ** 2
            t2[j, l] = 0.5 * g2 * s.h2 ** 2
    valid = ~np.isnan(t1)
    if not valid.any():
        raise HeuristicFailureError(
            "every penalty pair on the grid is ill-conditioned; raise the grid minimum"
        )
    s1 = np.where(valid.any(axis=1), np.nansum(t1, axis=1), -np.inf)
    s2 = np.where(valid.any(axis=0), np.nansum(t2, axis=0), -np.inf)
    return float(grid[int(np.argmax(s1))]), float(grid[int(np.argmax(s2))])


def relative_change(X, X_prev, zero_level=0.0):
    """``|X - X_prev| / |X|``, defined as 0 when ``|X| <= zero_level``."""
    nx = np.linalg.norm(X)
    if nx <= zero_level:
        return 0.0
    return float(np.linalg.norm(X - X_prev) / nx)


def _objective_monitor(prob):
    """Per-iteration objective; through the Gram matrix when ``C > N_Phi`` so
    the cost does not grow with the number of channels."""
    Phi, Y = prob.Phi, prob.Y
    l1, l2 = prob.lambda1, prob.lambda2
    if Phi.shape[0] <= Phi.shape[1]:
        def value(X, XP):
            R = Y - Phi @ X
            return float(np.vdot(R, R)) + l1 * float(np.abs(X).sum()) + l2 * float(np.abs(XP).sum())
        return value
    gram = Phi.T @ Phi
    PtY = Phi.T @ Y
    yy = float(np.vdot(Y, Y))

    def value(X, XP):
        data = yy - 2.0 * float(np.vdot(PtY, X)) + float(np.vdot(X, gram @ X))
        return max(data, 0.0) + l1 * float(np.abs(X).sum()) + l2 * float(np.abs(XP).sum())
    return value


def solve(prob, cfg=None, bases=None, mu=None):
    """Run the split Bregman iterations to convergence.

    Parameters
    ----------
    prob : Problem
    cfg : SolverConfig, optional
    bases : OperatorBases, optional
        Cached eigendecompositions for ``prob.Phi`` and ``prob.P``.
    mu : tuple of float, optional
        Initial penalties; overrides ``cfg.mu1``/``cfg.mu2`` and the grid
        heuristic.

    Returns
    -------
    SolveReport
    """
    cfg = cfg or SolverConfig()
    t_start = time.perf_counter()
    if bases is None:
        bases = operator_bases(prob.Phi, prob.P)
    if mu is not None:
        mu1, mu2 = mu
    elif cfg.mu1 is not None and cfg.mu2 is not None:
        mu1, mu2 = cfg.mu1, cfg.mu2
    else:
        h1, h2 = init_penalties(prob, cfg, bases)
        mu1 = cfg.mu1 if cfg.mu1 is not None else h1
        mu2 = cfg.mu2 if cfg.mu2 is not None else h2
    fact = precompute(prob, mu1, mu2, cfg.o_floor, bases)
    t_pre = time.perf_counter() - t_start

    state = initial_state(prob, mu1, mu2)
    deadline = None if cfg.time_limit is None else time.perf_counter() + cfg.time_limit
    trace = []
    converged = False
    reason = "iter_max"
    # an X this small relative to the data is zero up to rounding; with a
    # dominating lambda the iterates only decay geometrically towards it
    zero_level = ZERO_LEVEL * float(np.linalg.norm(prob.Y))
    want_obj = cfg.record_trace or cfg.target_loss is not None
    if want_obj:
        monitor = _objective_monitor(prob)
    for _ in range(cfg.iter_max):
        X_prev = state.X
        state = bregman_iterate(state, fact, prob)
        if want_obj:
            val = monitor(state.X, state.XP)
            if not np.isfinite(val):
                raise DivergenceError(f"non-finite objective at iteration {state.iter}")
            if cfg.record_trace:
                trace.append(val)
            if cfg.target_loss is not None:
                gap = abs(val - cfg.target_loss) / abs(cfg.target_loss)
                if gap < cfg.target_precision:
                    converged, reason = True, "target"
                    break
        elif not np.isfinite(np.sum(state.X)):
            raise DivergenceError(f"non-finite iterate at iteration {state.iter}")
        if relative_change(state.X, X_prev, zero_level) < cfg.eps:
            converged, reason = True, "eps"
            break
        if deadline is not None and time.perf_counter() > deadline:
            reason = "time_limit"
            break
        old = (state.mu1, state.mu2)
        state = update_penalties(state, cfg)
        if (state.mu1, state.mu2) != old:
            fact = refresh_shifts(fact, state.mu1, state.mu2)

    X_hat = state.X
    final = objective(X_hat, prob)
    if not np.isfinite(final):
        raise DivergenceError("non-finite objective at termination")
    return SolveReport(
        X_hat=X_hat,
        iterations=state.iter,
        objective=final,
        objective_trace=trace,
        final_residuals=(state.h1, state.h2),
        converged=converged,
        wall_time=time.perf_counter() - t_start,
        precompute_time=t_pre,
        mu_initial=(float(mu1), float(mu2)),
        mu_final=(state.mu1, state.mu2),
        stop_reason=reason,
    )
