"""Latent subgoal inference: Gibbs sampling of goals within variational fits.

Each state carries a latent goal; actions follow a goal-conditioned softmax
over expected shortest-path distance.  Goal assignments are coupled across
states either through the correlated stick-breaking prior (``method="pg"``)
or not at all (independent Dirichlet rows, ``method="dirichlet"``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..baselines import DirichletModel, dirichlet_posterior_sample
from ..envs import GridSpec, bfs_distances, gridworld_transitions
from ..kernels import KernelSpec
from ..pgvi import (
    HyperParams,
    fit,
    posterior_sample_probs,
    uniform_prior_mean,
)
from .imitation import DemonstrationSet


def subgoal_action_model(spec: GridSpec, goal: int, beta: float, transitions=None, distances=None) -> np.ndarray:
    """``p(a | s, g)`` proportional to ``exp(-beta * E[d(next(s, a), g)])``.

    ``d`` is the wall-respecting shortest-path length and the expectation is
    over the noisy transition row.  States from which the goal cannot be
    reached get a uniform row.
    """
    T = gridworld_transitions(spec) if transitions is None else transitions
    D = bfs_distances(spec) if distances is None else distances
    d = D[:, goal]
    P = np.full(T.shape[:2], 1.0 / T.shape[1])
    ok = np.isfinite(d)
    expected = T[ok][:, :, ok] @ d[ok]
    if np.isinf(beta):
        top = expected == expected.min(axis=1, keepdims=True)
        P[ok] = top / top.sum(axis=1, keepdims=True)
    else:
        Z = -beta * (expected - expected.min(axis=1, keepdims=True))
        E = np.exp(Z)
        P[ok] = E / E.sum(axis=1, keepdims=True)
    return P


def action_model_table(spec: GridSpec, goals: Sequence[int], beta: float) -> np.ndarray:
    """Stacked action models, shape ``(G, S, A)``."""
    T = gridworld_transitions(spec)
    D = bfs_distances(spec)
    return np.stack([subgoal_action_model(spec, g, beta, T, D) for g in goals])


@dataclass
class SubgoalState:
    goals: np.ndarray  # goal index (into the goal set) per state
    action_model: np.ndarray  # (G, S, A)
    samples: list = field(default_factory=list)


def _log_likelihood(demos: DemonstrationSet, action_model: np.ndarray) -> np.ndarray:
    """``sum_{d: s_d = s} log p(a_d | s, g)`` as an ``S x G`` table."""
    logp = np.log(np.maximum(action_model, 1e-300))  # (G, S, A)
    X = demos.counts.counts  # (S, A)
    return np.einsum("sa,gsa->sg", X, logp)


def _categorical_rows(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(len(p))[:, None] * cdf[:, -1:]
    return np.minimum((cdf < u).sum(axis=1), p.shape[1] - 1)


def subgoal_gibbs_vi(
    demos: DemonstrationSet,
    action_model: np.ndarray,
    method: str = "pg",
    kernel: Optional[KernelSpec] = None,
    n_samples: int = 100,
    burn_in: int = 50,
    rng=None,
    use_likelihood: bool = True,
    sweeps_per_iter: int = 1,
    em: bool = True,
    em_mu: bool = True,
):
    """Alternate goal-prior refits with Gibbs draws of the per-state goals.

    Each iteration (1) refits the goal prior on one-hot goal counts, one
    observation per state, (2) draws one set of goal probabilities from it
    and (3) resamples every state's goal with mass proportional to that
    probability times the demonstration likelihood.  ``use_likelihood=False``
    drops the likelihood, which leaves the goals unconditioned on the data.

    Returns
    -------
    policy : ndarray, shape (S, A)
        Average of ``p(a | s, g_s)`` over the retained goal draws.
    state : SubgoalState
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    G, S, A = action_model.shape
    if demos.S != S or demos.A != A:
        raise ValueError("demonstrations do not match the action model")
    loglik = _log_likelihood(demos, action_model) if use_likelihood else np.zeros((S, G))
    if G == 1:
        goals = np.zeros(S, dtype=int)
        return action_model[0].copy(), SubgoalState(goals, action_model, [goals] * n_samples)
    if method == "pg":
        if kernel is None:
            raise ValueError("the pg method needs a kernel over states")
        hyper = HyperParams(uniform_prior_mean(S, G), kernel)
    elif method != "dirichlet":
        raise ValueError(f"unknown method {method!r}")

    goals = _categorical_rows(loglik, rng)
    state = SubgoalState(goals, action_model)
    post = None
    policy = np.zeros((S, A))
    rows = np.arange(S)
    for it in range(burn_in + n_samples):
        X = np.zeros((S, G), dtype=np.int64)
        X[rows, goals] = 1
        if method == "pg":
            res = fit(X, hyper, max_sweeps=sweeps_per_iter, tol=None, em=em, em_mu=em_mu, init=post)
            post, hyper = res.posterior, res.hyper
            probs = posterior_sample_probs(post, rng)
        else:
            probs = dirichlet_posterior_sample(DirichletModel(X), rng)
        goals = _categorical_rows(np.log(np.maximum(probs, 1e-300)) + loglik, rng)
        if it >= burn_in:
            state.samples.append(goals.copy())
            policy += action_model[goals, rows]
    state.goals = goals
    return policy / n_samples, state
