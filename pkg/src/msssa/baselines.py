"""Comparison solvers: greedy pursuits, proximal gradient and smoothed SPG.

All solvers work on the same least-squares data term ``|Y - Phi X|_2^2`` as
the split Bregman solver so that objective values are directly comparable.
"""

import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np
from scipy import sparse

from .errors import DivergenceError, InvalidArgumentError, InvalidDimensionError, RankDeficiencyError
from .linalg import as_matrix, build_tv_matrix
from .solver import soft_threshold

__all__ = [
    "omp",
    "somp",
    "RegKind",
    "Regularizer",
    "prox",
    "penalty",
    "fista_solve",
    "SpgConfig",
    "spg_fused_lasso",
    "gap_constant",
    "smoothing_parameter",
    "smoothed_penalty",
    "smoothed_penalty_grad",
    "GradientReport",
]


SPARSE_MIN_COLS = 256


# -- greedy pursuits ---------------------------------------------------------


def _refit(Phi, support, Y):
    sub = Phi[:, support]
    coef, _, rank, _ = np.linalg.lstsq(sub, Y, rcond=None)
    if rank < len(support):
        raise RankDeficiencyError(
            f"active set {support} is rank deficient (rank {rank})"
        )
    return coef


def omp(y, Phi, k_max, resid_tol=0.0):
    """Orthogonal matching pursuit for one signal.

    At each step the atom most correlated with the residual is added
    (lowest index on ties) and all active coefficients are refitted by least
    squares.  Stops after `k_max` atoms or once ``|r| <= resid_tol``.

    Returns
    -------
    x : ndarray, shape (n_atoms,)
    """
    Phi = as_matrix(Phi, "Phi")
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != Phi.shape[0]:
        raise InvalidDimensionError("signal length does not match dictionary rows")
    if k_max > Phi.shape[1]:
        raise InvalidArgumentError("k_max exceeds the number of atoms")
    x = np.zeros(Phi.shape[1])
    support = []
    r = y.copy()
    coef = np.zeros(0)
    for _ in range(int(k_max)):
        if np.linalg.norm(r) <= resid_tol:
            break
        corr = np.abs(Phi.T @ r)
        corr[support] = -1.0
        j = int(np.argmax(corr))
        if corr[j] <= 1e-14 * np.linalg.norm(y):
            break
        support.append(j)
        coef = _refit(Phi, support, y)
        r = y - Phi[:, support] @ coef
    x[support] = coef
    return x


def somp(Y, Phi, k_max, resid_tol=0.0):
    """Simultaneous OMP: one support shared by all columns of `Y`.

    The atom maximizing ``sum_t |Phi^T R|[n, t]`` is selected at each step and
    every column is refitted on the common support.
    """
    Phi = as_matrix(Phi, "Phi")
    Y = as_matrix(Y, "Y")
    if Y.shape[0] != Phi.shape[0]:
        raise InvalidDimensionError("signal length does not match dictionary rows")
    if k_max > Phi.shape[1]:
        raise InvalidArgumentError("k_max exceeds the number of atoms")
    X = np.zeros((Phi.shape[1], Y.shape[1]))
    support = []
    R = Y.copy()
    coef = np.zeros((0, Y.shape[1]))
    ny = np.linalg.norm(Y)
    for _ in range(int(k_max)):
        if np.linalg.norm(R) <= resid_tol:
            break
        score = np.abs(Phi.T @ R).sum(axis=1)
        score[support] = -1.0
        j = int(np.argmax(score))
        if score[j] <= 1e-14 * ny:
            break
        support.append(j)
        coef = _refit(Phi, support, Y)
        R = Y - Phi[:, support] @ coef
    X[support] = coef
    return X


# -- proximal operators --------------------------------------------------------


class RegKind(str, Enum):
    L1 = "l1"
    L21 = "l21"
    L1_PLUS_L21 = "l1_l21"


@dataclass(frozen=True)
class Regularizer:
    """``lambda1 |X|_1`` and/or ``lambda21 sum_n |X[n, :]|_2``.

    The L1 kind ignores ``lambda21`` and the L21 kind ignores ``lambda1``.
    """

    kind: RegKind
    lambda1: float = 0.0
    lambda21: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", RegKind(self.kind))
        if self.lambda1 < 0 or self.lambda21 < 0:
            raise InvalidArgumentError("regularization weights must be non-negative")

    @property
    def w1(self):
        return self.lambda1 if self.kind != RegKind.L21 else 0.0

    @property
    def w21(self):
        return self.lambda21 if self.kind != RegKind.L1 else 0.0


def _group_shrink(M, tau):
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > tau, 1.0 - tau / norms, 0.0)
    return scale * M


def prox(reg, M, step):
    """Proximal operator of ``step * penalty(reg, .)`` at `M`.

    The sum ``l1 + l21`` is handled by soft-thresholding entries first and
    shrinking rows second, which is its exact proximal map.
    """
    if not step > 0:
        raise InvalidArgumentError("step must be positive")
    M = np.asarray(M, dtype=float)
    out = soft_threshold(M, step * reg.w1) if reg.kind != RegKind.L21 else M
    if reg.kind != RegKind.L1 and reg.w21 > 0:
        out = _group_shrink(out, step * reg.w21)
    return out


def penalty(reg, X):
    val = 0.0
    if reg.w1:
        val += reg.w1 * float(np.sum(np.abs(X)))
    if reg.w21:
        val += reg.w21 * float(np.sum(np.linalg.norm(X, axis=1)))
    return val


# -- accelerated gradient core ---------------------------------------------------


@dataclass
class GradientReport:
    X_hat: np.ndarray
    objective: float
    iterations: int
    converged: bool
    wall_time: float
    lipschitz: float
    objective_trace: List[float] = field(default_factory=list)
    smoothing: Optional[float] = None
    smoothed_objective: Optional[float] = None
    stop_reason: str = ""


class _LeastSquares:
    """``|Y - Phi X|^2`` with its state ``R = Phi X - Y`` cached per point."""

    def __init__(self, Y, Phi):
        self.Y = Y
        self.Phi = Phi
        self.PhiT2 = 2.0 * Phi.T

    def state(self, X):
        R = self.Phi @ X
        R -= self.Y
        return (R,)

    def value(self, s):
        return float(np.vdot(s[0], s[0]))

    def grad(self, s):
        return self.PhiT2 @ s[0]

    def divergence(self, sa, sb):
        # f(a) - f(b) - <grad f(b), a - b> for a quadratic is |Phi (a - b)|^2,
        # computed from the cached residuals to avoid cancellation in f(a) - f(b)
        d = sa[0] - sb[0]
        return float(np.vdot(d, d))


def _accelerated(model, prox_step, nonsmooth, X0, L0, rho, tol, iter_max,
                 exact=None, target=None, record_trace=False, callback=None, restart=False,
                 time_limit=None):
    """FISTA with geometric backtracking ``L <- rho * L``.

    `model` provides the differentiable part through ``state``, ``value``,
    ``grad`` and ``divergence``; ``prox_step(V, s)`` is the proximal map of
    ``s * nonsmooth``.  The sufficient-decrease test compares the Bregman
    divergence of the smooth part with ``L/2 |Z - Y|^2``.

    Without `target` the run stops once the best objective improved by less
    than ``tol`` (relative) over the second half of the iterations so far.
    With ``target = (loss, prec)`` it stops once
    ``|exact(state, X) - loss| / loss < prec``.  `time_limit` (seconds) ends
    the run with reason ``"time_limit"``.
    """
    deadline = None if time_limit is None else time.perf_counter() + time_limit
    X = X0.copy()
    Yk = X
    sx = model.state(X)
    sy = sx
    t = 1.0
    L = float(L0)
    best = [model.value(sx) + nonsmooth(X)]
    trace = []
    converged = False
    reason = "iter_max"
    obj = best[0]
    it = 0
    for it in range(1, iter_max + 1):
        gy = model.grad(sy)
        while True:
            Z = prox_step(Yk - gy * (1.0 / L), 1.0 / L)
            D = Z - Yk
            sz = model.state(Z)
            if model.divergence(sz, sy) <= 0.5 * L * float(np.vdot(D, D)):
                break
            L *= rho
            if not math.isfinite(L):
                raise DivergenceError("backtracking did not find a valid step")
        step = Z - X
        if restart and np.vdot(D, step) < 0:
            t = 1.0
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_next
        X, sx, t = Z, sz, t_next
        if beta:
            step *= beta
            step += Z
            Yk = step
            sy = model.state(Yk)
        else:
            Yk, sy = Z, sz
        obj = model.value(sx) + nonsmooth(X)
        if not math.isfinite(obj):
            raise DivergenceError(f"non-finite objective at iteration {it}")
        best.append(obj if obj < best[-1] else best[-1])
        if record_trace:
            trace.append(obj)
        if callback is not None:
            callback(X)
        if target is not None:
            loss, prec = target
            if abs(exact(sx, X) - loss) <= prec * abs(loss):
                converged, reason = True, "target"
                break
        elif best[it // 2] - best[it] <= tol * abs(best[it]) and it >= 2:
            converged, reason = True, "tol"
            break
        if deadline is not None and it % 32 == 0 and time.perf_counter() > deadline:
            reason = "time_limit"
            break
    return X, obj, it, converged, L, trace, reason


def _check_data(Y, Phi):
    Y = as_matrix(Y, "Y")
    Phi = as_matrix(Phi, "Phi")
    if Y.shape[0] != Phi.shape[0]:
        raise InvalidDimensionError("Y and Phi have different numbers of rows")
    return Y, Phi


def fista_solve(Y, Phi, reg, precision=1e-6, iter_max=20000, L0=1.0, rho=1.05,
                X0=None, record_trace=False, target=None, callback=None):
    """Minimize ``|Y - Phi X|_2^2 + penalty(reg, X)`` by FISTA with backtracking.

    Parameters
    ----------
    Y : array_like, shape (C, T)
    Phi : array_like, shape (C, N)
    reg : Regularizer
    precision : float
        Relative decrease of the best objective over the second half of the
        run below which the iterations end.
    iter_max : int
    L0, rho : float
        Initial Lipschitz estimate and its backtracking growth factor.
    X0 : array_like, optional
        Starting point, zero by default.
    target : tuple (loss, precision), optional
        Stop once the objective is within ``precision`` (relative) of ``loss``.

    Returns
    -------
    GradientReport
    """
    if not precision > 0:
        raise InvalidArgumentError("precision must be positive")
    Y, Phi = _check_data(Y, Phi)
    t0 = time.perf_counter()
    model = _LeastSquares(Y, Phi)

    def exact(s, X):
        return model.value(s) + penalty(reg, X)

    X0 = np.zeros((Phi.shape[1], Y.shape[1])) if X0 is None else as_matrix(X0, "X0")
    X, obj, it, conv, L, trace, reason = _accelerated(
        model, lambda V, s: prox(reg, V, s), lambda X: penalty(reg, X),
        X0, L0, rho, precision, int(iter_max), exact=exact, target=target,
        record_trace=record_trace, callback=callback,
    )
    return GradientReport(X, obj, it, conv, time.perf_counter() - t0, L, trace, stop_reason=reason)


# -- smoothing proximal gradient for the analysis-regularized problem -----------


def gap_constant(n_atoms, n_samples, n_filters):
    """Half the number of smoothed entries, ``N (T + N_P) / 2``."""
    return 0.5 * n_atoms * (n_samples + n_filters)


def smoothing_parameter(final_loss, precision, k_gap):
    """Largest safe smoothing ``0.95 * final_loss * precision / k_gap``.

    The exact and smoothed objectives differ by at most ``k_gap * mu``, so
    this keeps the smoothing bias below ``precision`` relative to the optimum.
    """
    return 0.95 * final_loss * precision / k_gap


def _huber(Z, mu):
    A = np.abs(Z)
    return float(np.sum(np.where(A <= mu, Z * Z / (2.0 * mu), A - 0.5 * mu)))


def smoothed_penalty(X, P, lambda1, lambda2, mu):
    """``sum h_mu(lambda1 X) + sum h_mu(lambda2 X P)``.

    ``h_mu(z) = max_{|a| <= 1} (a z - mu a^2 / 2)`` is the Huber function:
    ``z^2 / (2 mu)`` on ``[-mu, mu]`` and ``|z| - mu / 2`` outside.  It lies
    between ``|z| - mu/2`` and ``|z|``.
    """
    return _huber(lambda1 * X, mu) + _huber(lambda2 * (X @ P), mu)


def smoothed_penalty_grad(X, P, lambda1, lambda2, mu):
    """Gradient of :func:`smoothed_penalty` in `X`."""
    g = lambda1 * np.clip(lambda1 * X / mu, -1.0, 1.0)
    g = g + lambda2 * np.clip(lambda2 * (X @ P) / mu, -1.0, 1.0) @ P.T
    return g


class _SmoothedAnalysis(_LeastSquares):
    """Data term plus the Huber smoothing of ``lambda1 |X|_1 + lambda2 |X P|_1``.

    Both penalties are stacked into one linear map ``X -> X @ [lambda1 I, lambda2 P]``
    whose ``N x (T + N_P)`` image is smoothed entry-wise.  The cached state is
    ``(R, U, c)`` with ``U`` the image divided by ``mu`` and ``c = clip(U)``.
    """

    def __init__(self, Y, Phi, P, lambda1, lambda2, mu):
        super().__init__(Y, Phi)
        T = Y.shape[1]
        self.mu = float(mu)
        self.T = T
        self.l1, self.l2 = float(lambda1), float(lambda2)
        self.mode = "dense"
        if T >= 2 and P.shape == (T, T - 1) and np.array_equal(P, build_tv_matrix(T)):
            # first differences: slicing instead of matrix products
            self.mode = "tv"
            return
        Cm = np.hstack([lambda1 * np.eye(T), lambda2 * P])
        # long signals with a banded operator: sparse products, applied from
        # the left on transposes (csr @ dense is the fast scipy path)
        if Cm.shape[1] > SPARSE_MIN_COLS and np.count_nonzero(Cm) < 0.05 * Cm.size:
            self.mode = "sparse"
            self.CmuT = sparse.csr_matrix(Cm.T / self.mu)
            self.Cm = sparse.csr_matrix(Cm)
        else:
            self.Cmu = Cm / self.mu
            self.CmT = np.ascontiguousarray(Cm.T)

    def _apply(self, X):
        if self.mode == "tv":
            # slab 0 holds lambda1 X, slab 1 lambda2 X P padded with a zero last
            # column; differences are taken on the flattened rows (contiguous
            # memory) and the wrap-around entries land in that padding column
            U = np.empty((2,) + X.shape)
            np.multiply(X, self.l1 / self.mu, out=U[0])
            xf = X.reshape(-1)
            d = U[1].reshape(-1)
            np.subtract(xf[1:], xf[:-1], out=d[:-1])
            d *= self.l2 / self.mu
            U[1, :, -1] = 0.0
            return U
        if self.mode == "sparse":
            return np.ascontiguousarray((self.CmuT @ X.T).T)
        return X @ self.Cmu

    def _apply_adjoint(self, c):
        if self.mode == "tv":
            G = c[0] * self.l1
            g = G.reshape(-1)
            cf = c[1].reshape(-1)
            # (c2 P^T)[t] = c2[t-1] - c2[t]; the padding column is zero
            g -= self.l2 * cf
            g[1:] += self.l2 * cf[:-1]
            return G
        if self.mode == "sparse":
            return (self.Cm @ c.T).T
        return c @ self.CmT

    def state(self, X):
        R = self.Phi @ X
        R -= self.Y
        U = self._apply(X)
        # maximum/minimum in place is several times faster than np.clip on small arrays
        c = np.maximum(U, -1.0)
        np.minimum(c, 1.0, out=c)
        return R, U, c

    def value(self, s):
        R, U, c = s
        # h(z) = c z - mu c^2 / 2 with c = clip(z / mu)
        return float(np.vdot(R, R)) + self.mu * float(np.vdot(c, U - 0.5 * c))

    def exact(self, s, X=None):
        R, U, _ = s
        return float(np.vdot(R, R)) + self.mu * float(np.sum(np.abs(U)))

    def grad(self, s):
        R, _, c = s
        return self.PhiT2 @ R + self._apply_adjoint(c)

    def divergence(self, sa, sb):
        # Huber divergence per entry: mu (c_a - c_b) (u_a - (c_a + c_b) / 2)
        d = sa[0] - sb[0]
        dc = sa[2] - sb[2]
        return float(np.vdot(d, d)) + self.mu * float(np.vdot(dc, sa[1] - 0.5 * (sa[2] + sb[2])))


@dataclass(frozen=True)
class SpgConfig:
    """Settings for :func:`spg_fused_lasso`.

    ``precision`` fixes the smoothing through :func:`smoothing_parameter` and
    is also the relative-change stopping tolerance.  ``final_loss`` is an
    estimate of the optimal exact loss; when missing a coarse bootstrap run
    provides it.  ``target_loss`` switches to the benchmark stopping rule.
    """

    precision: float = 1e-6
    L0: float = 1.0
    rho: float = 1.05
    iter_max: int = 200000
    final_loss: Optional[float] = None
    target_loss: Optional[float] = None
    smoothing: Optional[float] = None
    record_trace: bool = False
    restart: bool = False
    time_limit: Optional[float] = None

    def __post_init__(self):
        if not self.precision > 0:
            raise InvalidArgumentError("precision must be positive")
        if not self.rho > 1:
            raise InvalidArgumentError("rho must exceed 1")
        if int(self.iter_max) < 1:
            raise InvalidArgumentError("iter_max must be at least 1")


def spg_fused_lasso(prob, cfg=None, X0=None, callback=None):
    """Smoothing proximal gradient on ``|Y - Phi X|^2 + l1 and analysis terms``.

    Both non-smooth terms are replaced by their Huber smoothings (see
    :func:`smoothed_penalty`) and the resulting smooth function is minimized
    by FISTA with geometric backtracking.  The report holds the minimizer of
    the smoothed objective, the exact objective at that point
    (``objective``), the smoothed one (``smoothed_objective``) and the
    smoothing parameter used.
    """
    cfg = cfg or SpgConfig()
    t0 = time.perf_counter()
    Y, Phi, P = prob.Y, prob.Phi, prob.P
    l1, l2 = prob.lambda1, prob.lambda2
    k_gap = gap_constant(prob.n_atoms, prob.n_samples, prob.n_filters)
    if X0 is None:
        X0 = np.zeros((prob.n_atoms, prob.n_samples))
    boot_iters = 0

    mu = cfg.smoothing
    if mu is None:
        final_loss = cfg.final_loss
        if final_loss is None:
            final_loss = cfg.target_loss
        if final_loss is None:
            coarse = 1e-2
            boot = SpgConfig(precision=coarse, L0=cfg.L0, rho=cfg.rho, iter_max=cfg.iter_max,
                             smoothing=smoothing_parameter(float(np.vdot(Y, Y)), coarse, k_gap),
                             restart=cfg.restart)
            b = spg_fused_lasso(prob, boot, X0=X0)
            final_loss, X0, boot_iters = b.objective, b.X_hat, b.iterations
        mu = smoothing_parameter(final_loss, cfg.precision, k_gap)
    if not mu > 0:
        # zero loss at the optimum leaves nothing to smooth against
        mu = np.finfo(float).tiny

    model = _SmoothedAnalysis(Y, Phi, P, l1, l2, mu)
    target = None if cfg.target_loss is None else (cfg.target_loss, cfg.precision)
    X, sobj, it, conv, L, trace, reason = _accelerated(
        model, lambda V, s: V, lambda X: 0.0, as_matrix(X0, "X0"),
        cfg.L0, cfg.rho, cfg.precision, int(cfg.iter_max), exact=model.exact, target=target,
        record_trace=cfg.record_trace, callback=callback, restart=cfg.restart,
        time_limit=cfg.time_limit,
    )
    sx = model.state(X)
    return GradientReport(
        X_hat=X,
        objective=model.exact(sx, X),
        iterations=it + boot_iters,
        converged=conv,
        wall_time=time.perf_counter() - t0,
        lipschitz=L,
        objective_trace=trace,
        smoothing=mu,
        smoothed_objective=sobj,
        stop_reason=reason,
    )
