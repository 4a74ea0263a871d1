"""Independent Dirichlet model: the correlation-agnostic baseline."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .pgvi import CountMatrix


@dataclass(frozen=True)
class DirichletModel:
    counts: CountMatrix
    alpha: Optional[np.ndarray] = None

    def __post_init__(self):
        if not isinstance(self.counts, CountMatrix):
            object.__setattr__(self, "counts", CountMatrix(self.counts))
        alpha = self.alpha
        if alpha is None:
            alpha = np.ones(self.counts.counts.shape)
        alpha = np.broadcast_to(np.asarray(alpha, dtype=float), self.counts.counts.shape).copy()
        if np.any(~np.isfinite(alpha)) or np.any(alpha <= 0):
            raise ValueError("Dirichlet concentrations must be positive")
        object.__setattr__(self, "alpha", alpha)

    @property
    def concentration(self) -> np.ndarray:
        return self.counts.counts + self.alpha


def dirichlet_posterior_mean(model: DirichletModel) -> np.ndarray:
    a = model.concentration
    return a / a.sum(axis=1, keepdims=True)


def dirichlet_posterior_sample(model: DirichletModel, rng) -> np.ndarray:
    """One draw per row via normalized Gamma variates."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    g = rng.standard_gamma(model.concentration)
    s = g.sum(axis=1, keepdims=True)
    # rows can underflow to all zeros for tiny concentrations
    for c in np.flatnonzero(s[:, 0] == 0):
        a = model.concentration[c]
        g[c] = 0.0
        g[c, rng.choice(len(a), p=a / a.sum())] = 1.0
        s[c] = 1.0
    return g / s
