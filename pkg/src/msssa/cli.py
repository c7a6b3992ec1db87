"""Command-line interface.

::

    msssa synth     [--config F] [--seed N] --out DIR
    msssa decompose --Y F --Phi F (--P F | --tv) [--lambda1 L] [--lambda2 L]
                    [--precision EPS] [--trace] --out DIR
    msssa tune      --data DIR [--method NAME] [--seed N] --out DIR
    msssa bench     --preset speed-T1|speed-T2|speed-T3|recovery
                    [--scale desk|paper] [--seed N] --out DIR

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure
(ill-conditioned penalties, divergence, failed reference run), 4 file I/O
failure, 5 every benchmark point failed.

``MSSSA_NUM_THREADS`` caps the thread count of the dense linear algebra
kernels (BLAS/LAPACK); the usual ``OMP_NUM_THREADS`` and
``OPENBLAS_NUM_THREADS`` variables work as well.
"""

import argparse
import csv
import dataclasses
import json
import logging
import os
import platform
import sys
import time

import numpy as np

from . import __version__
from .errors import IOFailure, MsssaError, NumericError
from .experiments import (
    METHODS,
    RECOVERY_PRESETS,
    SPEED_PRESETS,
    cross_validate,
    default_grids,
    recovery_rows,
    run_recovery_grid,
    run_speed_bench,
)
from .io import load_config, read_matrix, write_matrix
from .linalg import build_tv_matrix
from .solver import Problem, SolverConfig, default_mu_grid, init_penalties, operator_bases, solve
from .synth import SynthSpec, make_dataset

log = logging.getLogger("msssa")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_IO = 4
EXIT_ALL_FAILED = 5

# columns that legitimately differ between identical runs
TIMING_FIELDS = ("wall_time", "precompute_time", "init_time", "elapsed")


def _ensure_dir(path):
    if not os.path.isdir(path):
        raise IOFailure(f"output directory {path!r} does not exist")
    return path


def _write_json(path, doc):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=True)
            fh.write("\n")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def _write_csv(path, rows):
    fields = []
    for r in rows:
        for k in r:
            if k not in fields:
                fields.append(k)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def _environment():
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
        "msssa": __version__,
    }


def solver_config(cfg, **overrides):
    s = dict(cfg["solver"])
    grid = default_mu_grid(int(s.pop("mu_grid_size")), s.pop("mu_grid_min"), s.pop("mu_grid_max"))
    s.update(overrides)
    return SolverConfig(mu_grid=grid, **s)


def synth_spec(cfg, seed):
    return SynthSpec(seed=int(seed), **cfg["synth"])


# -- commands --------------------------------------------------------------------


def cmd_synth(args, cfg):
    out = _ensure_dir(args.out or cfg["out"])
    seed = cfg["seed"] if args.seed is None else args.seed
    spec = synth_spec(cfg, seed)
    ext = "." + cfg["format"]
    ds = make_dataset(spec)
    write_matrix(os.path.join(out, "Phi" + ext), ds.Phi)
    width = max(3, len(str(spec.K - 1)))
    for k, (X, Y) in enumerate(zip(ds.X, ds.Y)):
        write_matrix(os.path.join(out, f"X_{k:0{width}d}{ext}"), X)
        write_matrix(os.path.join(out, f"Y_{k:0{width}d}{ext}"), Y)
    manifest = {
        "seed": int(seed),
        "spec": {k: getattr(spec, k) for k in cfg["synth"]},
        "coherence": ds.coherence,
        "format": cfg["format"],
        "files": {
            "Phi": "Phi" + ext,
            "X": [f"X_{k:0{width}d}{ext}" for k in range(spec.K)],
            "Y": [f"Y_{k:0{width}d}{ext}" for k in range(spec.K)],
        },
        "activities": [
            [{"atom": a.atom, "center": a.center, "duration": a.duration, "alpha": a.alpha} for a in acts]
            for acts in ds.activities
        ],
    }
    _write_json(os.path.join(out, "manifest.json"), manifest)
    print(f"wrote {spec.K} signals to {out} (coherence {ds.coherence:.4f})")
    return EXIT_OK


def cmd_decompose(args, cfg):
    out = _ensure_dir(args.out or cfg["out"])
    Y = read_matrix(args.Y)
    Phi = read_matrix(args.Phi)
    use_tv = args.tv or (args.P is None and cfg["problem"]["tv"])
    if args.P is not None and args.tv:
        raise_validation("--P and --tv are mutually exclusive")
    if args.P is not None:
        P = read_matrix(args.P)
    elif use_tv:
        P = build_tv_matrix(Y.shape[1])
    else:
        raise_validation("an analysis operator is required: pass --P FILE or --tv")
    l1 = cfg["problem"]["lambda1"] if args.lambda1 is None else args.lambda1
    l2 = cfg["problem"]["lambda2"] if args.lambda2 is None else args.lambda2
    prob = Problem(Y, Phi, P, l1, l2)
    over = {"record_trace": bool(args.trace)}
    if args.precision is not None:
        over["eps"] = args.precision
    rep = solve(prob, solver_config(cfg, **over))
    ext = "." + cfg["format"]
    x_path = os.path.join(out, "X_hat" + ext)
    write_matrix(x_path, rep.X_hat)
    if args.P is None:
        write_matrix(os.path.join(out, "P" + ext), P)
    ny = float(np.linalg.norm(Y))
    report = rep.to_dict(include_trace=bool(args.trace))
    report.update(
        lambda1=prob.lambda1,
        lambda2=prob.lambda2,
        X_hat=os.path.basename(x_path),
        reconstruction_error=float(np.linalg.norm(Y - Phi @ rep.X_hat) / ny) if ny else 0.0,
    )
    _write_json(os.path.join(out, "report.json"), report)
    print(f"{rep.stop_reason} after {rep.iterations} iterations, objective {rep.objective:.10g}")
    return EXIT_OK


def _load_dataset(path):
    try:
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
            man = json.load(fh)
    except OSError as exc:
        raise IOFailure(f"cannot read dataset manifest in {path}: {exc}") from exc
    Phi = read_matrix(os.path.join(path, man["files"]["Phi"]))
    Xs = [read_matrix(os.path.join(path, f)) for f in man["files"]["X"]]
    Ys = [read_matrix(os.path.join(path, f)) for f in man["files"]["Y"]]
    return man, Phi, Xs, Ys


def cmd_tune(args, cfg):
    out = _ensure_dir(args.out or cfg["out"])
    if not args.data:
        raise_validation("tune needs --data DIR (a directory written by `msssa synth`)")
    man, Phi, Xs, Ys = _load_dataset(args.data)
    method = args.method or cfg["tune"]["method"]
    if method not in METHODS:
        raise_validation(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    seed = cfg["seed"] if args.seed is None else args.seed
    perm = np.random.default_rng(seed).permutation(len(Ys))
    n_train = max(1, int(round(cfg["tune"]["train_fraction"] * len(Ys))))
    tr = [int(i) for i in perm[:n_train]]
    P = build_tv_matrix(Ys[0].shape[1])
    base = Problem(Ys[tr[0]], Phi, P)
    bases = operator_bases(Phi, P)
    scale = float(np.mean([2.0 * np.max(np.abs(Phi.T @ Ys[i])) for i in tr]))
    scfg = solver_config(cfg)
    mu = init_penalties(base.with_weights(0.01 * scale, 0.01 * scale), scfg, bases)
    ctx = dict(Phi=Phi, prob=base, bases=bases, solver_cfg=scfg, mu=mu,
               fista_precision=1e-6, fista_iter_max=5000)
    grid = default_grids(scale, Phi.shape[0], Phi.shape[1])[method]
    best, scores = cross_validate([Ys[i] for i in tr], [Xs[i] for i in tr], METHODS[method], grid, ctx)
    doc = {
        "method": method,
        "seed": int(seed),
        "train_indices": tr,
        "best": list(best),
        "grid": [list(g) for g in grid],
        "mean_error": scores,
        "mu_initial": list(mu),
    }
    _write_json(os.path.join(out, "tune.json"), doc)
    print(f"{method}: best parameters {best} (mean training error {min(scores):.4f})")
    return EXIT_OK


def cmd_bench(args, cfg):
    out = _ensure_dir(args.out or cfg["out"])
    preset = args.preset or cfg["bench"]["preset"]
    scale = args.scale or cfg["bench"]["scale"]
    seed = cfg["seed"] if args.seed is None else args.seed
    t0 = time.perf_counter()
    summary = {"preset": preset, "scale": scale, "seed": int(seed), "environment": _environment()}
    if preset == "recovery":
        if scale not in RECOVERY_PRESETS:
            raise_validation(f"unknown scale {scale!r}")
        rc = RECOVERY_PRESETS[scale]
        cells = run_recovery_grid(rc, seed=seed, progress=lambda c: log.info(
            "cell M=%d d=%s done", c.M, c.d_range))
        rows = recovery_rows(cells)
        failed = all(not c.mean_eps for c in cells)
        summary["config"] = {k: getattr(rc, k) for k in rc.__dataclass_fields__}
        summary["cells"] = [
            {"M": c.M, "d_range": list(c.d_range), "mean_eps": c.mean_eps,
             "diff_vs_msssa": c.diff_vs_msssa, "missing": c.missing}
            for c in cells
        ]
    else:
        key = (preset, scale)
        if key not in SPEED_PRESETS:
            raise_validation(f"unknown preset/scale {preset}/{scale}")
        setting = SPEED_PRESETS[key]
        over = {}
        if cfg["bench"]["repetitions"] is not None:
            over["repetitions"] = int(cfg["bench"]["repetitions"])
        if cfg["bench"]["spg_time_limit"] is not None:
            over["spg_time_limit"] = float(cfg["bench"]["spg_time_limit"])
        if args.precision is not None:
            over["precisions"] = (float(args.precision),)
        if over:
            setting = dataclasses.replace(setting, **over)
        rows = run_speed_bench(setting, seed=seed, progress=lambda r: log.info(
            "%s=%s prec=%g %s %.3fs %s", r["dimension"], r["value"], r["precision"],
            r["method"], r["wall_time"], r["status"]))
        failed = all(r["status"] == "failed" for r in rows)
        summary["config"] = {k: getattr(setting, k) for k in setting.__dataclass_fields__}
        summary["rows"] = len(rows)
        summary["invalid_rows"] = sum(1 for r in rows if not r["valid"])
    summary["elapsed"] = time.perf_counter() - t0
    name = preset.replace("-", "_")
    _write_csv(os.path.join(out, f"{name}.csv"), rows)
    _write_json(os.path.join(out, f"{name}.json"), summary)
    print(f"wrote {len(rows)} rows to {os.path.join(out, name + '.csv')}")
    return EXIT_ALL_FAILED if failed else EXIT_OK


class _ValidationExit(Exception):
    pass


def raise_validation(msg):
    raise _ValidationExit(msg)


def build_parser():
    p = argparse.ArgumentParser(prog="msssa", description="Structured sparse decomposition tools.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="JSON configuration file")
        sp.add_argument("--seed", type=int, help="random seed (overrides the configuration)")
        sp.add_argument("--out", metavar="DIR", help="existing output directory")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)

    sp = sub.add_parser("decompose", help="solve one structured decomposition problem")
    common(sp)
    sp.add_argument("--Y", required=True, metavar="FILE", help="signals (C x T)")
    sp.add_argument("--Phi", required=True, metavar="FILE", help="dictionary (C x N), unit-norm atoms")
    sp.add_argument("--P", metavar="FILE", help="analysis operator (T x N_P)")
    sp.add_argument("--tv", action="store_true", help="use the first-difference operator")
    sp.add_argument("--lambda1", type=float)
    sp.add_argument("--lambda2", type=float)
    sp.add_argument("--precision", type=float, help="relative-change stopping tolerance eps")
    sp.add_argument("--trace", action="store_true", help="record the objective at every iteration")

    sp = sub.add_parser("tune", help="cross-validate regularization weights on a dataset")
    common(sp)
    sp.add_argument("--data", metavar="DIR", help="dataset written by `msssa synth`")
    sp.add_argument("--method", choices=sorted(METHODS))

    sp = sub.add_parser("bench", help="run a speed or recovery benchmark")
    common(sp)
    sp.add_argument("--preset", choices=["speed-T1", "speed-T2", "speed-T3", "recovery"])
    sp.add_argument("--scale", choices=["desk", "paper"])
    sp.add_argument("--precision", type=float, help="run a single precision instead of the preset's list")
    return p


COMMANDS = {"synth": cmd_synth, "decompose": cmd_decompose, "tune": cmd_tune, "bench": cmd_bench}


def _limit_threads():
    n = os.environ.get("MSSSA_NUM_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads()
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except _ValidationExit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except IOFailure as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MsssaError, ValueError, TypeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
