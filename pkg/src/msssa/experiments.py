"""Benchmarks: solver speed against a precomputed optimum and structure recovery.

Speed runs time the split Bregman solver and SPG on identical problems,
each stopped once its exact objective is within a relative `precision` of
a high-accuracy reference loss.  Recovery runs generate piecewise-constant
datasets, tune every method's weights on a training half and report the mean
relative error on the test half.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .baselines import Regularizer, RegKind, SpgConfig, fista_solve, omp, somp, spg_fused_lasso
from .errors import MsssaError, ReferenceFailureError, UndefinedMetricError, InvalidArgumentError
from .linalg import build_tv_matrix
from .solver import (
    Problem,
    SolverConfig,
    init_penalties,
    operator_bases,
    solve,
)
from .synth import SynthSpec, gen_coefficients, gen_dictionary, synthesize

log = logging.getLogger(__name__)

__all__ = [
    "error_metric",
    "reference_solution",
    "calibrate_lambda",
    "SpeedSetting",
    "SPEED_PRESETS",
    "run_speed_bench",
    "cross_validate",
    "RecoveryCell",
    "RecoveryConfig",
    "RECOVERY_PRESETS",
    "run_recovery_grid",
    "METHODS",
]


def error_metric(X_true, X_hat):
    """Relative Frobenius distance ``|X - X_hat| / |X|``."""
    X_true = np.asarray(X_true, dtype=float)
    X_hat = np.asarray(X_hat, dtype=float)
    if X_true.shape != X_hat.shape:
        raise InvalidArgumentError(f"shape mismatch {X_true.shape} vs {X_hat.shape}")
    nx = np.linalg.norm(X_true)
    if nx == 0.0:
        raise UndefinedMetricError("relative error is undefined for an all-zero reference")
    return float(np.linalg.norm(X_true - X_hat) / nx)


def reference_solution(prob, eps=1e-10, iter_max=100000, bases=None, mu=None, mu_grid=None):
    """High-accuracy optimum ``(X_star, loss_star)`` from the split Bregman solver.

    Raises :class:`ReferenceFailureError` when the run does not meet `eps`
    within `iter_max` iterations.
    """
    kw = {} if mu_grid is None else {"mu_grid": tuple(mu_grid)}
    cfg = SolverConfig(eps=eps, iter_max=iter_max, **kw)
    rep = solve(prob, cfg, bases=bases, mu=mu)
    if not rep.converged:
        raise ReferenceFailureError(
            f"reference run stopped after {rep.iterations} iterations ({rep.stop_reason})"
        )
    return rep.X_hat, rep.objective


def lambda_max(prob):
    """Smallest ``lambda1`` for which ``X = 0`` solves the pure LASSO."""
    return float(2.0 * np.max(np.abs(prob.Phi.T @ prob.Y)))


def calibrate_lambda(prob, target=0.1, tol=0.02, ratio=1.0, eps=1e-6, max_steps=40, bases=None):
    """Bisection on ``log lambda1`` so that ``|Y - Phi X| / |Y|`` is within
    `tol` of `target`, with ``lambda2 = ratio * lambda1``.

    Returns ``(lambda1, lambda2, residual)``; the closest point seen is
    returned when the band is not reached within `max_steps`.
    """
    ny = np.linalg.norm(prob.Y)
    if ny == 0.0:
        return 0.0, 0.0, 0.0
    bases = bases or operator_bases(prob.Phi, prob.P)
    hi = math.log(lambda_max(prob))
    lo = hi - math.log(1e6)
    best = None
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        lam = math.exp(mid)
        rep = solve(prob.with_weights(lam, ratio * lam), SolverConfig(eps=eps), bases=bases)
        res = float(np.linalg.norm(prob.Y - prob.Phi @ rep.X_hat) / ny)
        if best is None or abs(res - target) < abs(best[2] - target):
            best = (lam, ratio * lam, res)
        if abs(res - target) <= tol:
            break
        if res > target:
            hi = mid
        else:
            lo = mid
    return best


# -- speed benchmark -------------------------------------------------------------


@dataclass(frozen=True)
class SpeedSetting:
    """One speed test: two fixed dimensions and one swept dimension.

    Exactly one of `C`, `N_Phi`, `T` is a tuple of sweep values.

    SPG runs are capped at `spg_time_limit` seconds.  With
    ``spg_budget="adaptive"`` a run at a tighter precision ``p`` is capped
    further at ``spg_budget_margin * B_p * S_0 / B_0`` where ``B`` and ``S``
    are the split Bregman and SPG times and ``0`` is the loosest precision:
    once SPG has run that long the ratio ``B_p / S_p`` is known to be below
    ``B_0 / S_0`` and a longer run adds nothing to the comparison.  Capped
    runs are reported with status ``timeout`` and their cap in
    ``time_limit``.
    """

    name: str
    C: object
    N_Phi: object
    T: object
    precisions: Tuple[float, ...] = (1e-4, 1e-5, 1e-6)
    M: int = 10
    d_min: float = 0.1
    d_max: float = 0.3
    repetitions: int = 3
    spg_repetitions: int = 1
    spg_time_limit: float = 60.0
    spg_budget: str = "fixed"
    spg_budget_margin: float = 1.25
    bregman_time_limit: float = 600.0
    spg_iter_max: int = 10000000
    lambda_ratio: float = 1.0

    def __post_init__(self):
        swept = [k for k in ("C", "N_Phi", "T") if isinstance(getattr(self, k), (tuple, list))]
        if len(swept) != 1:
            raise InvalidArgumentError(f"exactly one swept dimension expected, got {swept}")
        object.__setattr__(self, swept[0], tuple(int(v) for v in getattr(self, swept[0])))
        object.__setattr__(self, "precisions", tuple(sorted((float(p) for p in self.precisions), reverse=True)))
        if not self.precisions or min(self.precisions) <= 0:
            raise InvalidArgumentError("precisions must be positive")
        if self.repetitions < 1 or self.spg_repetitions < 1:
            raise InvalidArgumentError("repetitions must be at least 1")
        if self.spg_budget not in ("fixed", "adaptive"):
            raise InvalidArgumentError("spg_budget must be 'fixed' or 'adaptive'")
        if not self.spg_budget_margin >= 1:
            raise InvalidArgumentError("spg_budget_margin must be at least 1")

    @property
    def swept(self):
        return next(k for k in ("C", "N_Phi", "T") if isinstance(getattr(self, k), tuple))

    def points(self):
        key = self.swept
        for v in getattr(self, key):
            dims = {"C": self.C, "N_Phi": self.N_Phi, "T": self.T}
            dims[key] = v
            yield key, v, dims


_DESK = dict(repetitions=5, spg_repetitions=1, spg_time_limit=300.0, spg_budget="adaptive")
_FULL = dict(spg_time_limit=3600.0, bregman_time_limit=3600.0)

SPEED_PRESETS = {
    ("speed-T1", "desk"): SpeedSetting("T1", C=20, N_Phi=40, T=(150, 300, 600), **_DESK),
    ("speed-T2", "desk"): SpeedSetting("T2", C=20, N_Phi=(150, 300, 600), T=60, **_DESK),
    # T3 solves take tens of milliseconds, so more repetitions steady the median
    ("speed-T3", "desk"): SpeedSetting("T3", C=(150, 300, 600), N_Phi=40, T=60,
                                       **dict(_DESK, repetitions=25)),
    ("speed-T1", "paper"): SpeedSetting(
        "T1", C=100, N_Phi=200,
        T=tuple(range(50, 501, 50)) + tuple(range(600, 1001, 100)) + tuple(range(2000, 6001, 1000)),
        **_FULL),
    ("speed-T2", "paper"): SpeedSetting(
        "T2", C=100, T=300,
        N_Phi=tuple(range(50, 501, 50)) + tuple(range(600, 1001, 100)) + tuple(range(2000, 5001, 1000)),
        **_FULL),
    ("speed-T3", "paper"): SpeedSetting(
        "T3", N_Phi=200, T=300,
        C=tuple(range(50, 501, 50)) + tuple(range(600, 1001, 100)) + tuple(range(2000, 8001, 1000)),
        **_FULL),
}


def speed_problem(dims, setting, seed, lambda_rule=None):
    """Build the fused-LASSO problem of one sweep point.

    The dictionary is an unconstrained unit-norm Gaussian matrix and the
    signals carry no noise.  `lambda_rule(prob)` returns ``(lambda1, lambda2)``;
    the default calibrates ``lambda1`` to a relative residual of 0.1 with
    ``lambda2 = setting.lambda_ratio * lambda1``.
    """
    # the coefficients depend on (N_Phi, T) only, so a channel sweep keeps them
    s_dict = np.random.SeedSequence([int(seed), dims["C"], dims["N_Phi"], dims["T"]])
    s_coef = np.random.SeedSequence([int(seed), 0, dims["N_Phi"], dims["T"]])
    Phi = gen_dictionary(dims["C"], dims["N_Phi"], 1.0, np.random.default_rng(s_dict))
    spec = SynthSpec(C=dims["C"], T=dims["T"], N_Phi=dims["N_Phi"], K=1, M=setting.M,
                     d_min=setting.d_min, d_max=setting.d_max, coherence_max=1.0)
    X, _ = gen_coefficients(spec, np.random.default_rng(s_coef))
    Y = synthesize(Phi, X)
    prob = Problem.fused_lasso(Y, Phi)
    if lambda_rule is None:
        l1, l2, _ = calibrate_lambda(prob, ratio=setting.lambda_ratio)
    else:
        l1, l2 = lambda_rule(prob)
    return prob.with_weights(l1, l2), X


def _time_bregman(prob, precision, loss_star, mu, setting):
    cfg = SolverConfig(eps=1e-15, iter_max=10 ** 7, target_loss=loss_star,
                       target_precision=precision, time_limit=setting.bregman_time_limit)
    t0 = time.perf_counter()
    rep = solve(prob, cfg, mu=mu)
    wall = time.perf_counter() - t0
    return wall, rep.precompute_time, rep.iterations, rep.objective, rep.stop_reason == "target"


def _time_spg(prob, precision, loss_star, setting, time_limit=None):
    cfg = SpgConfig(precision=precision, final_loss=loss_star, target_loss=loss_star,
                    iter_max=setting.spg_iter_max,
                    time_limit=setting.spg_time_limit if time_limit is None else time_limit)
    t0 = time.perf_counter()
    rep = spg_fused_lasso(prob, cfg)
    wall = time.perf_counter() - t0
    return wall, 0.0, rep.iterations, rep.objective, rep.stop_reason == "target"


def _median_run(runs):
    walls = [r[0] for r in runs]
    order = np.argsort(walls, kind="stable")
    return runs[int(order[(len(runs) - 1) // 2])], float(np.median(walls))


def run_speed_bench(setting, lambda_rule=None, seed=0, progress=None):
    """Time both solvers on every sweep point and precision.

    Per point the weights are fixed by `lambda_rule`, the initial penalties
    by the grid heuristic (untimed, as an off-line step, reported as
    ``init_time``) and the reference loss by :func:`reference_solution`.
    Each method runs until its exact objective is within the precision of the
    reference loss; split Bregman runs ``setting.repetitions`` times and SPG
    ``setting.spg_repetitions`` times, and the median wall time is reported.
    Split Bregman repetitions are interleaved round-robin over all points and
    precisions, so a transient slowdown of the machine does not land on the
    repetitions of a single point.  SPG runs afterwards, point by point,
    from the loosest to the tightest precision.

    Returns
    -------
    list of dict
        One row per (point, precision, method) with keys ``setting``,
        ``dimension``, ``value``, ``C``, ``N_Phi``, ``T``, ``precision``,
        ``method``, ``wall_time``, ``precompute_time``, ``init_time``,
        ``iterations``, ``final_loss``, ``loss_star``, ``rel_gap``,
        ``status`` (``ok``, ``timeout`` or ``failed``), ``valid``,
        ``time_limit``, ``lambda1``, ``lambda2``.
    """
    points = []
    for key, value, dims in setting.points():
        try:
            prob, _ = speed_problem(dims, setting, seed, lambda_rule)
            t0 = time.perf_counter()
            bases = operator_bases(prob.Phi, prob.P)
            mu = init_penalties(prob, SolverConfig(), bases)
            init_time = time.perf_counter() - t0
            _, loss_star = reference_solution(prob, bases=bases, mu=mu)
        except MsssaError as exc:
            log.warning("point %s=%s skipped: %s", key, value, exc)
            points.append((key, value, dims, None, str(exc)))
            continue
        points.append((key, value, dims, (prob, mu, init_time, loss_star), None))

    # split Bregman: one repetition of every (point, precision) per round
    b_runs = {}
    for _ in range(setting.repetitions):
        for i, (key, value, _, ctx, _) in enumerate(points):
            if ctx is None:
                continue
            prob, mu, _, loss_star = ctx
            for prec in setting.precisions:
                runs = b_runs.setdefault((i, prec), [])
                if runs and not runs[-1][4]:
                    continue  # a timed-out run is censored; repeating it adds nothing
                try:
                    runs.append(_time_bregman(prob, prec, loss_star, mu, setting))
                except MsssaError as exc:
                    log.warning("bregman failed at %s=%s: %s", key, value, exc)

    rows = []
    for i, (key, value, dims, ctx, err) in enumerate(points):
        if ctx is None:
            for prec in setting.precisions:
                for method in ("bregman", "spg"):
                    rows.append(_failed_row(setting, key, value, dims, prec, method, err))
            continue
        prob, mu, init_time, loss_star = ctx
        ref = None  # (bregman, spg) wall times at the loosest precision
        for prec in setting.precisions:
            b_wall = None
            for method in ("bregman", "spg"):
                if method == "bregman":
                    limit = setting.bregman_time_limit
                    runs = b_runs.get((i, prec), [])
                else:
                    limit = setting.spg_time_limit
                    if setting.spg_budget == "adaptive" and ref is not None and b_wall is not None:
                        cap = setting.spg_budget_margin * b_wall * ref[1] / ref[0]
                        limit = min(limit, max(cap, setting.spg_budget_margin * b_wall))
                    runs = []
                    for _ in range(setting.spg_repetitions):
                        try:
                            runs.append(_time_spg(prob, prec, loss_star, setting, limit))
                        except MsssaError as exc:
                            log.warning("spg failed at %s=%s: %s", key, value, exc)
                            continue
                        if not runs[-1][4]:
                            break
                if not runs:
                    rows.append(_failed_row(setting, key, value, dims, prec, method, "solver error"))
                    continue
                (_, pre, iters, loss, reached), wall = _median_run(runs)
                if not all(r[4] for r in runs):
                    reached = False
                gap = abs(loss - loss_star) / abs(loss_star) if loss_star else abs(loss)
                row = dict(
                    setting=setting.name, dimension=key, value=value,
                    C=dims["C"], N_Phi=dims["N_Phi"], T=dims["T"],
                    precision=prec, method=method,
                    wall_time=wall, precompute_time=pre, init_time=init_time,
                    iterations=int(iters), final_loss=loss, loss_star=loss_star, rel_gap=gap,
                    status="ok" if reached else "timeout",
                    valid=bool(reached and gap <= prec),
                    time_limit=float(limit),
                    lambda1=prob.lambda1, lambda2=prob.lambda2,
                )
                rows.append(row)
                if method == "bregman":
                    b_wall = wall if reached else None
                if progress is not None:
                    progress(row)
            if ref is None:
                s_row = rows[-1]
                b_row = rows[-2] if len(rows) >= 2 else None
                if (b_row is not None and s_row["method"] == "spg" and b_row["method"] == "bregman"
                        and s_row["status"] != "failed" and b_row["status"] == "ok"):
                    ref = (b_row["wall_time"], s_row["wall_time"])
    return rows


def _failed_row(setting, key, value, dims, prec, method, msg):
    return dict(
        setting=setting.name, dimension=key, value=value,
        C=dims["C"], N_Phi=dims["N_Phi"], T=dims["T"], precision=prec, method=method,
        wall_time=float("nan"), precompute_time=float("nan"), init_time=float("nan"),
        iterations=0, final_loss=float("nan"), loss_star=float("nan"), rel_gap=float("nan"),
        status="failed", valid=False, time_limit=float("nan"),
        lambda1=float("nan"), lambda2=float("nan"), error=msg,
    )


# -- structure recovery ------------------------------------------------------------


class _Method:
    """A decomposition method with its tuning grid.

    ``fit(Y, params, ctx)`` returns the estimated ``X``; ``ctx`` carries
    quantities shared by all signals of a cell (dictionary, operator bases,
    penalties).
    """

    def __init__(self, name, fit, grid):
        self.name = name
        self.fit = fit
        self.grid = grid


def _fit_msssa(Y, params, ctx):
    l1, l2 = params
    prob = ctx["prob"].with_signals(Y).with_weights(l1, l2)
    rep = solve(prob, ctx["solver_cfg"], bases=ctx["bases"], mu=ctx["mu"])
    return rep.X_hat


def _fit_fista(kind):
    def fit(Y, params, ctx):
        if kind == RegKind.L1:
            reg = Regularizer(kind, lambda1=params[0])
        elif kind == RegKind.L21:
            reg = Regularizer(kind, lambda21=params[0])
        else:
            reg = Regularizer(kind, lambda1=params[0], lambda21=params[1])
        return fista_solve(Y, ctx["Phi"], reg, precision=ctx["fista_precision"],
                           iter_max=ctx["fista_iter_max"]).X_hat
    return fit


def _fit_omp(Y, params, ctx):
    k = int(params[0])
    return np.column_stack([omp(Y[:, t], ctx["Phi"], k) for t in range(Y.shape[1])])


def _fit_somp(Y, params, ctx):
    return somp(Y, ctx["Phi"], int(params[0]))


def _grid2(a, b):
    return [(x, y) for x in a for y in b]


def default_grids(scale, C, N_Phi):
    """Weight grids, expressed as fractions of the family's ``lambda_max``."""
    f1 = (0.003, 0.01, 0.03, 0.1)
    f2 = (0.003, 0.01, 0.03, 0.1)
    ks = tuple(k for k in (1, 2, 3, 5, 8, 12, 16, 20) if k <= min(C, N_Phi))
    return {
        "msssa": [(a * scale, b * scale) for a, b in _grid2(f1, f2)],
        "l1": [(a * scale,) for a in (0.001, 0.003, 0.01, 0.03, 0.1, 0.3)],
        "l21": [(a * scale,) for a in (0.01, 0.03, 0.1, 0.3, 1.0, 3.0)],
        "l1_l21": [(a * scale, b * scale) for a, b in _grid2((0.003, 0.01, 0.03, 0.1), (0.03, 0.1, 0.3, 1.0))],
        "omp": [(k,) for k in ks],
        "somp": [(k,) for k in ks],
    }


METHODS = {
    "msssa": _fit_msssa,
    "l1": _fit_fista(RegKind.L1),
    "l21": _fit_fista(RegKind.L21),
    "l1_l21": _fit_fista(RegKind.L1_PLUS_L21),
    "omp": _fit_omp,
    "somp": _fit_somp,
}


def cross_validate(Ys, Xs, fit, grid, ctx=None):
    """Pick the grid point with the smallest mean relative error.

    Parameters
    ----------
    Ys, Xs : sequence of ndarray
        Training signals and their true coefficient matrices.
    fit : callable
        ``fit(Y, params, ctx) -> X_hat``.
    grid : sequence of tuple
        Candidate parameters, ordered from weakest to strongest
        regularization.  Ties (within 1e-12) go to the later entry.

    Returns
    -------
    best : tuple
    scores : list of float
        Mean error per grid point (``inf`` where a fit failed).
    """
    if not Ys or not grid:
        raise InvalidArgumentError("cross-validation needs training data and a non-empty grid")
    errs = np.full((len(grid), len(Ys)), np.inf)
    for i, params in enumerate(grid):
        for k, (Y, X) in enumerate(zip(Ys, Xs)):
            try:
                X_hat = fit(Y, params, ctx)
            except MsssaError as exc:
                log.warning("grid point %s failed: %s", params, exc)
                break
            nx = np.linalg.norm(X)
            errs[i, k] = error_metric(X, X_hat) if nx > 0 else float(np.linalg.norm(X_hat))
    scores = [float(np.mean(e)) for e in errs]
    best_i = 0
    for i, s in enumerate(scores):
        if s <= scores[best_i] + 1e-12:
            best_i = i
    return grid[best_i], scores


@dataclass
class RecoveryCell:
    M: int
    d_range: Tuple[float, float]
    mean_eps: Dict[str, float]
    diff_vs_msssa: Dict[str, float]
    params: Dict[str, tuple] = field(default_factory=dict)
    missing: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class RecoveryConfig:
    """Grid cells, dataset shape and tuning settings of a recovery run."""

    cells: Tuple[Tuple[int, Tuple[float, float]], ...]
    C: int = 20
    T: int = 120
    N_Phi: int = 30
    K: int = 40
    train_fraction: float = 0.5
    methods: Tuple[str, ...] = ("msssa", "l1", "l21", "l1_l21", "omp", "somp")
    alpha_sigma: float = 2.0
    noise_sigma: float = 0.0
    coherence_max: float = 0.35
    solver_eps: float = 1e-4
    fista_precision: float = 1e-6
    fista_iter_max: int = 5000


FULL_CELLS = tuple(
    (m, (round(lo, 2), round(min(lo + 0.1, 1.0), 2)))
    for m in range(20, 111, 10)
    for lo in (0.05,) + tuple(0.15 + 0.1 * i for i in range(9))
)

RECOVERY_PRESETS = {
    "desk": RecoveryConfig(
        cells=((80, (0.45, 0.55)), (90, (0.45, 0.55)), (100, (0.45, 0.55)),
               (20, (0.05, 0.15)), (50, (0.05, 0.15)), (80, (0.05, 0.15)),
               (20, (0.05, 0.15)), (20, (0.05, 0.15))),
    ),
    "paper": RecoveryConfig(cells=FULL_CELLS, T=300, K=100),
}


def run_recovery_grid(config, seed=0, grids=None, progress=None):
    """Tune and evaluate every method on every grid cell.

    Each cell draws its own dataset (dictionary and ``K`` signals) from a seed
    derived from `seed` and the cell index, splits it into a training and a
    test part, cross-validates each method on the training part and averages
    the relative error on the test part.  A method that fails in a cell is
    listed in ``missing`` and the run continues.

    Returns
    -------
    list of RecoveryCell
    """
    if "msssa" not in config.methods:
        raise InvalidArgumentError("the method list must include msssa")
    out = []
    for ci, (M, (dmin, dmax)) in enumerate(config.cells):
        ss = np.random.SeedSequence([int(seed), ci, int(M), int(round(dmin * 1000))])
        s_dict, s_coef, s_split = ss.spawn(3)
        Phi = gen_dictionary(config.C, config.N_Phi, config.coherence_max, np.random.default_rng(s_dict))
        spec = SynthSpec(C=config.C, T=config.T, N_Phi=config.N_Phi, K=config.K, M=M,
                         d_min=dmin, d_max=dmax, alpha_sigma=config.alpha_sigma,
                         noise_sigma=0.0, coherence_max=config.coherence_max)
        rng = np.random.default_rng(s_coef)
        Xs, Ys = [], []
        for _ in range(config.K):
            X, _ = gen_coefficients(spec, rng)
            Y = synthesize(Phi, X)
            if config.noise_sigma > 0:
                Y = Y + config.noise_sigma * rng.standard_normal(Y.shape)
            Xs.append(X)
            Ys.append(Y)
        perm = np.random.default_rng(s_split).permutation(config.K)
        n_train = int(round(config.train_fraction * config.K))
        tr, te = perm[:n_train], perm[n_train:]

        P = build_tv_matrix(config.T)
        base = Problem(Ys[0], Phi, P)
        scale = float(np.mean([2.0 * np.max(np.abs(Phi.T @ Ys[i])) for i in tr]))
        bases = operator_bases(Phi, P)
        ctx = dict(Phi=Phi, prob=base, bases=bases,
                   solver_cfg=SolverConfig(eps=config.solver_eps),
                   fista_precision=config.fista_precision, fista_iter_max=config.fista_iter_max)
        # penalties from the heuristic on one training signal, shared by the cell
        ctx["mu"] = init_penalties(base.with_signals(Ys[tr[0]]).with_weights(0.01 * scale, 0.01 * scale),
                                   SolverConfig(), bases)
        all_grids = default_grids(scale, config.C, config.N_Phi)
        if grids:
            all_grids.update(grids)

        mean_eps, params, missing = {}, {}, []
        for name in config.methods:
            fit = METHODS[name]
            try:
                best, _ = cross_validate([Ys[i] for i in tr], [Xs[i] for i in tr], fit,
                                         all_grids[name], ctx)
                errs = [error_metric(Xs[i], fit(Ys[i], best, ctx)) for i in te if np.any(Xs[i])]
                mean_eps[name] = float(np.mean(errs))
                params[name] = tuple(float(p) for p in best)
            except MsssaError as exc:
                log.warning("cell %d method %s failed: %s", ci, name, exc)
                missing.append(name)
        ref = mean_eps.get("msssa")
        diffs = {k: (ref - v if ref is not None else float("nan")) for k, v in mean_eps.items()}
        cell = RecoveryCell(M, (dmin, dmax), mean_eps, diffs, params, missing)
        out.append(cell)
        if progress is not None:
            progress(cell)
    return out


def recovery_rows(cells):
    """Flatten recovery cells into one CSV row per (cell, method)."""
    rows = []
    for c in cells:
        for name, eps in c.mean_eps.items():
            rows.append(dict(M=c.M, d_min=c.d_range[0], d_max=c.d_range[1], method=name,
                             mean_eps=eps, diff_vs_msssa=c.diff_vs_msssa[name],
                             params=" ".join(f"{p:.6g}" for p in c.params.get(name, ()))))
        for name in c.missing:
            rows.append(dict(M=c.M, d_min=c.d_range[0], d_max=c.d_range[1], method=name,
                             mean_eps=float("nan"), diff_vs_msssa=float("nan"), params="missing"))
    return rows
