"""Policy reconstruction from state-action demonstrations."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..baselines import DirichletModel, dirichlet_posterior_mean
from ..kernels import KernelSpec
from ..pgvi import CountMatrix, HyperParams, expected_probs, fit, posterior_mean_probs, uniform_prior_mean


@dataclass(frozen=True)
class DemonstrationSet:
    pairs: tuple  # ((state, action), ...)
    S: int
    A: int

    def __post_init__(self):
        pairs = tuple((int(s), int(a)) for s, a in self.pairs)
        for s, a in pairs:
            if not (0 <= s < self.S and 0 <= a < self.A):
                raise ValueError(f"demonstration ({s}, {a}) out of range")
        object.__setattr__(self, "pairs", pairs)

    @property
    def counts(self) -> CountMatrix:
        X = np.zeros((self.S, self.A), dtype=np.int64)
        for s, a in self.pairs:
            X[s, a] += 1
        return CountMatrix(X)

    def states(self) -> np.ndarray:
        return np.unique([s for s, _ in self.pairs]).astype(int)


def sample_demonstrations(policy: np.ndarray, states, per_state: int, rng) -> DemonstrationSet:
    """Draw ``per_state`` expert actions at each of ``states``."""
    pairs = []
    for s in states:
        for a in rng.choice(policy.shape[1], size=per_state, p=policy[s]):
            pairs.append((s, a))
    return DemonstrationSet(tuple(pairs), policy.shape[0], policy.shape[1])


def pg_policy(
    X: CountMatrix,
    kernel: KernelSpec,
    em: bool = True,
    em_mu: bool = False,
    optimize_lengthscale: bool = False,
    max_sweeps: int = 200,
    tol: float = 1e-6,
    n_samples: Optional[int] = None,
    rng=None,
):
    """Fit the correlated model on ``X`` and return its posterior-mean rows.

    With ``n_samples`` unset the mean is computed by quadrature; otherwise by
    Monte Carlo over joint posterior draws.
    """
    hyper = HyperParams(uniform_prior_mean(X.C, X.K), kernel)
    res = fit(X, hyper, max_sweeps=max_sweeps, tol=tol, em=em, em_mu=em_mu, optimize_lengthscale=optimize_lengthscale)
    if n_samples is None:
        return expected_probs(res.posterior), res
    return posterior_mean_probs(res.posterior, n_samples, rng), res


def imitation_fit(demos: DemonstrationSet, method: str = "pg", kernel: Optional[KernelSpec] = None, **kw) -> np.ndarray:
    """Estimate the expert's ``S x A`` policy matrix from demonstrations."""
    X = demos.counts
    if method == "dirichlet":
        return dirichlet_posterior_mean(DirichletModel(X))
    if method == "pg":
        if kernel is None:
            raise ValueError("the pg method needs a kernel")
        return pg_policy(X, kernel, **kw)[0]
    raise ValueError(f"unknown method {method!r}")
