"""File formats: JSON model checkpoints and CSV tables.

Floats are written with :func:`repr`, the shortest string that parses back
to the same double, so checkpoints round-trip bit-exactly.  CSV files use a
header row, ``.`` as decimal separator and LF line endings.
"""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kernels import KernelSpec
from .pgvi import CountMatrix, HyperParams, StickStats, VariationalPosterior

CHECKPOINT_VERSION = 1


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def checkpoint_dict(hyper: HyperParams, post: VariationalPosterior, elbo_trace: Sequence[float] = ()) -> dict:
    """Plain-data representation of a fitted model; matrices are row-major lists."""
    C, Km1 = post.lam.shape
    kern = hyper.kernel
    return {
        "version": CHECKPOINT_VERSION,
        "C": C,
        "K": Km1 + 1,
        "kernel": {
            "type": "squared_exponential",
            "theta": float(kern.theta),
            "lengthscale": float(kern.lengthscale),
            "distance_matrix": _floats(kern.distance),
        },
        "mu": _floats(hyper.mu),
        "lambda": _floats(post.lam),
        "V": _floats(post.V),
        "w": _floats(post.w),
        "b": _floats(post.stats.b),
        "kappa": _floats(post.stats.kappa),
        "elbo_trace": [float(v) for v in elbo_trace],
    }


def save_checkpoint(path, hyper: HyperParams, post: VariationalPosterior, elbo_trace: Sequence[float] = ()) -> None:
    text = json.dumps(checkpoint_dict(hyper, post, elbo_trace), allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8", newline="\n")


def load_checkpoint(path) -> tuple[HyperParams, VariationalPosterior, list]:
    """Inverse of :func:`save_checkpoint`.

    Returns
    -------
    hyper, posterior, elbo_trace
    """
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        C, K = int(d["C"]), int(d["K"])
        kd = d["kernel"]
        if kd.get("type") != "squared_exponential":
            raise ValueError(f"unsupported kernel type {kd.get('type')!r}")
        dist = np.array(kd["distance_matrix"], dtype=float).reshape(C, C)
        kernel = KernelSpec(dist, kd["theta"], kd["lengthscale"])
        shape = (C, K - 1)
        hyper = HyperParams(np.array(d["mu"], dtype=float).reshape(shape), kernel)
        stats = StickStats(np.array(d["b"], dtype=float).reshape(shape), np.array(d["kappa"], dtype=float).reshape(shape))
        post = VariationalPosterior(
            lam=np.array(d["lambda"], dtype=float).reshape(shape),
            V=np.array(d["V"], dtype=float).reshape(K - 1, C, C),
            w=np.array(d["w"], dtype=float).reshape(shape),
            stats=stats,
        )
    except KeyError as exc:
        raise ValueError(f"checkpoint {path} lacks field {exc.args[0]!r}") from None
    return hyper, post, list(d.get("elbo_trace", []))


def read_counts_csv(path) -> CountMatrix:
    """Count matrix from a CSV with header ``covariate_id,k1,...,kK``.

    Rows may come in any order but must cover covariates ``0..C-1`` once each.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path} is empty") from None
        K = len(header) - 1
        expected = ["covariate_id"] + [f"k{j}" for j in range(1, K + 1)]
        if K < 2 or [h.strip() for h in header] != expected:
            raise ValueError(f"{path}: header must be covariate_id,k1,...,kK with K >= 2, got {header}")
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != K + 1:
                raise ValueError(f"{path}:{lineno}: expected {K + 1} fields, got {len(row)}")
            try:
                cid = int(row[0])
                vals = [int(v) for v in row[1:]]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: counts must be integers") from None
            if cid in rows:
                raise ValueError(f"{path}:{lineno}: duplicate covariate_id {cid}")
            rows[cid] = vals
    if sorted(rows) != list(range(len(rows))) or not rows:
        raise ValueError(f"{path}: covariate ids must be 0..C-1 without gaps")
    return CountMatrix(np.array([rows[c] for c in range(len(rows))]))


def write_counts_csv(path, X: CountMatrix) -> None:
    K = X.K
    rows = [[c] + [int(v) for v in X.counts[c]] for c in range(X.C)]
    write_csv(path, ["covariate_id"] + [f"k{j}" for j in range(1, K + 1)], rows)


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Deterministic CSV: header row, ``repr`` floats, LF line endings."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    os.replace(tmp, path)


def read_csv(path) -> tuple[list, list]:
    """Header and string rows of a CSV written by :func:`write_csv`."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"metric file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], rows[1:]


ARROW_HEADER = ["seed", "state", "x", "y", "dx", "dy"]


def arrow_rows(seed: int, policy: np.ndarray, positions: np.ndarray) -> list:
    """Rows of per-state mean-direction vectors for quiver plots of a grid policy."""
    from .agents.metrics import arrow_vectors

    vec = arrow_vectors(policy)
    return [[seed, s, int(positions[s][0]), int(positions[s][1]), vec[s, 0], vec[s, 1]] for s in range(len(vec))]
