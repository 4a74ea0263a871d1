"""Squared-exponential covariance matrices over finite covariate sets."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, LinAlgError

from .errors import NumericalError

JITTER_START = 1e-9
JITTER_MAX = 1e-3
# covariance factorizations with a smaller reciprocal condition count as failed
MIN_RCOND = 1e-12


def jittered_cholesky(A: np.ndarray, name: str = "matrix", min_rcond: float = 0.0) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A``, adding diagonal jitter if needed.

    Jitter starts at ``1e-9 * mean(diag(A))`` and grows by a factor of ten
    up to ``1e-3 * mean(diag(A))``.  With ``min_rcond > 0`` a factorization
    that succeeds on a matrix whose eigenvalue ratio is below ``min_rcond``
    also counts as a failure.

    Returns
    -------
    L : ndarray
        Lower-triangular factor of ``A + jitter * I``.
    jitter : float
        The absolute jitter that was added (0.0 if none was required).
    """
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise NumericalError(f"{name} contains non-finite entries")
    scale = float(np.mean(np.diag(A)))
    if scale <= 0.0:
        raise NumericalError(f"{name} has non-positive mean diagonal {scale!r}")
    jitter = 0.0
    rel = JITTER_START
    eye = np.eye(A.shape[0])
    while True:
        try:
            L, _ = cho_factor(A + jitter * eye, lower=True, check_finite=False)
            if min_rcond > 0:
                ev = np.linalg.eigvalsh(A + jitter * eye)
                if ev[0] < min_rcond * ev[-1]:
                    raise LinAlgError("numerically singular")
            return np.tril(L), jitter
        except LinAlgError:
            if rel > JITTER_MAX * (1 + 1e-12):
                raise NumericalError(
                    f"{name} ({A.shape[0]}x{A.shape[0]}) is not positive definite "
                    f"even with jitter {jitter:.3g} (mean diagonal {scale:.3g})"
                ) from None
            jitter = rel * scale
            rel *= 10.0


def grid_distance(positions: Sequence[Sequence[float]]) -> np.ndarray:
    """Euclidean distances between 2-D grid coordinates."""
    P = np.asarray(positions, dtype=float)
    diff = P[:, None, :] - P[None, :, :]
    D = np.sqrt(np.sum(diff**2, axis=-1))
    np.fill_diagonal(D, 0.0)
    return D


def queue_distance(states: Sequence[Sequence[int]], buffers: Sequence[int]) -> np.ndarray:
    """Euclidean distance between queue-length vectors scaled by buffer size."""
    X = np.asarray(states, dtype=float) / np.asarray(buffers, dtype=float)
    return grid_distance(X)


def _check_distance(D: np.ndarray) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError(f"distance matrix must be square, got shape {D.shape}")
    if not np.all(np.isfinite(D)) or np.any(D < 0):
        raise ValueError("distance matrix must be finite and nonnegative")
    if np.any(np.diag(D) != 0):
        raise ValueError("distance matrix must have a zero diagonal")
    if not np.array_equal(D, D.T):
        raise ValueError("distance matrix must be symmetric")
    return D


@dataclass(frozen=True)
class BaseFactor:
    """Jittered unit-scale covariance and its Cholesky factor."""

    matrix: np.ndarray
    chol: np.ndarray
    jitter: float

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))


@dataclass(frozen=True)
class KernelSpec:
    """Squared-exponential kernel ``theta * exp(-d^2 / l^2)`` over a distance table.

    The unit-scale matrix and its factorization depend only on the
    length-scale and are cached, so rescaling via :meth:`with_theta` is free.
    """

    distance: np.ndarray
    theta: float = 1.0
    lengthscale: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "distance", _check_distance(self.distance))
        if not (np.isfinite(self.theta) and self.theta > 0):
            raise ValueError(f"theta must be positive, got {self.theta!r}")
        if not (np.isfinite(self.lengthscale) and self.lengthscale > 0):
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale!r}")

    @property
    def size(self) -> int:
        return self.distance.shape[0]

    def with_theta(self, theta: float) -> "KernelSpec":
        return KernelSpec(self.distance, float(theta), self.lengthscale, _cache=self._cache)

    def with_lengthscale(self, lengthscale: float) -> "KernelSpec":
        return KernelSpec(self.distance, self.theta, float(lengthscale))

    def unit_covariance(self) -> np.ndarray:
        """``exp(-d^2 / l^2)`` without jitter."""
        return np.exp(-(self.distance**2) / self.lengthscale**2)

    def unit_covariance_grad(self) -> np.ndarray:
        """Derivative of :meth:`unit_covariance` with respect to the length-scale."""
        d2 = self.distance**2
        return np.exp(-d2 / self.lengthscale**2) * 2.0 * d2 / self.lengthscale**3

    @property
    def base(self) -> BaseFactor:
        """Factorized unit-scale covariance, jittered as required."""
        bf = self._cache.get("base")
        if bf is None:
            S = self.unit_covariance()
            L, jitter = jittered_cholesky(S, name="unit covariance", min_rcond=MIN_RCOND)
            if jitter:
                S = S + jitter * np.eye(self.size)
            bf = BaseFactor(S, L, jitter)
            self._cache["base"] = bf
        return bf

    def covariance(self) -> np.ndarray:
        """The covariance actually used in inference: ``theta`` times the jittered base."""
        return self.theta * self.base.matrix


def build_covariance(spec: KernelSpec) -> np.ndarray:
    """Raw squared-exponential covariance ``theta * exp(-d^2/l^2)``.

    The matrix is returned without jitter (its diagonal is exactly ``theta``)
    but is checked to be factorizable under the jitter policy.
    """
    spec.base  # raises NumericalError if no admissible jitter works
    return spec.theta * spec.unit_covariance()
