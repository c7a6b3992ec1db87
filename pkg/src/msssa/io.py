"""Matrix files and run configuration.

Two matrix formats are supported, chosen by file extension:

``.npy``
    NumPy's binary format: the 6-byte magic ``\\x93NUMPY``, a two-byte
    version, a little-endian header length and an ASCII header giving the
    element encoding (``'<f8'``, IEEE-754 binary64, little endian), the
    storage order (always C / row-major here) and the shape ``(rows, cols)``,
    followed by the raw payload.  Reading back gives the same bits.
``.csv``
    One matrix row per line, comma separated, every value printed with 17
    significant digits (``%.17g``), which round-trips binary64 exactly.

Configuration files are JSON objects; see :data:`CONFIG_SCHEMA` for the
accepted keys and their defaults.  Unknown keys are rejected.
"""

import copy
import json
import os

import numpy as np

from .errors import InvalidArgumentError, IOFailure

__all__ = ["read_matrix", "write_matrix", "load_config", "default_config", "CONFIG_SCHEMA", "IOFailure"]


def _kind(path):
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in (".npy", ".csv"):
        raise InvalidArgumentError(f"unsupported matrix file extension {ext!r} (use .npy or .csv)")
    return ext


def write_matrix(path, M):
    """Write a 2-D float64 matrix to `path` (``.npy`` or ``.csv``)."""
    ext = _kind(path)
    M = np.ascontiguousarray(M, dtype="<f8")
    if M.ndim != 2:
        raise InvalidArgumentError(f"only 2-D matrices can be written, got shape {M.shape}")
    try:
        if ext == ".npy":
            with open(path, "wb") as fh:
                np.save(fh, M, allow_pickle=False)
        else:
            np.savetxt(path, M, fmt="%.17g", delimiter=",")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def read_matrix(path):
    """Read a matrix written by :func:`write_matrix`; always returns a 2-D float64 array."""
    ext = _kind(path)
    try:
        if ext == ".npy":
            M = np.load(path, allow_pickle=False)
        else:
            M = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise IOFailure(f"{path} is not a valid matrix file: {exc}") from exc
    if M.ndim != 2:
        raise IOFailure(f"{path} holds a {M.ndim}-D array, expected a matrix")
    if M.dtype != np.float64:
        raise IOFailure(f"{path} has element type {M.dtype}, expected float64")
    return np.ascontiguousarray(M)


# Every section and key accepted in a configuration file, with its default.
CONFIG_SCHEMA = {
    "seed": 0,
    "out": "out",
    "format": "npy",
    "problem": {
        "lambda1": 0.1,
        "lambda2": 0.1,
        "tv": True,
    },
    "solver": {
        "eps": 1e-6,
        "iter_max": 10000,
        "r1": 0.95,
        "r2": 0.95,
        "rho1": 1.05,
        "rho2": 1.05,
        "mu_grid_size": 20,
        "mu_grid_min": 1e-3,
        "mu_grid_max": 1e3,
        "o_floor": 1e-8,
        "mu1": None,
        "mu2": None,
        "balance_residuals": True,
        "rescale_duals": True,
    },
    "synth": {
        "C": 20,
        "T": 300,
        "N_Phi": 30,
        "K": 100,
        "M": 20,
        "d_min": 0.05,
        "d_max": 0.15,
        "alpha_sigma": 2.0,
        "noise_sigma": 0.0,
        "coherence_max": 0.35,
    },
    "tune": {
        "method": "msssa",
        "train_fraction": 0.5,
    },
    "bench": {
        "preset": "speed-T1",
        "scale": "desk",
        "repetitions": None,
        "spg_time_limit": None,
    },
}


def default_config():
    return copy.deepcopy(CONFIG_SCHEMA)


def _merge(base, update, where):
    for key, value in update.items():
        if key not in base:
            raise InvalidArgumentError(f"unknown configuration key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise InvalidArgumentError(f"configuration key {where}{key!r} must be an object")
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value


def load_config(path=None):
    """Defaults overlaid with the JSON object in `path` (if given)."""
    cfg = default_config()
    if path is None:
        return cfg
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IOFailure(f"cannot read configuration {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"configuration {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise InvalidArgumentError("configuration must be a JSON object")
    _merge(cfg, doc, "")
    return cfg
