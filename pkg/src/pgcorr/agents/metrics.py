"""Distances between policies or next-state distributions."""
from __future__ import annotations

import numpy as np

from ..envs import ACTIONS, TabularMdp
from .planning import optimal_policy, policy_evaluation


def hellinger(p, q) -> np.ndarray:
    """Hellinger distance ``||sqrt(p) - sqrt(q)|| / sqrt(2)`` along the last axis."""
    p = np.clip(np.asarray(p, dtype=float), 0.0, None)
    q = np.clip(np.asarray(q, dtype=float), 0.0, None)
    h = np.sqrt(np.sum((np.sqrt(p) - np.sqrt(q)) ** 2, axis=-1) / 2.0)
    h = np.minimum(h, 1.0)
    return h[()] if h.ndim == 0 else h


def value_loss(policy_hat: np.ndarray, mdp: TabularMdp, policy_opt=None) -> float:
    """Mean over states of ``V*(s) - V^pi_hat(s)`` under the true MDP."""
    if policy_opt is None:
        policy_opt = optimal_policy(mdp)
    return float(np.mean(policy_evaluation(mdp, policy_opt) - policy_evaluation(mdp, policy_hat)))


def arrow_vectors(policy: np.ndarray) -> np.ndarray:
    """Per-state 2-D mean direction ``sum_a pi(a|s) * unit(a)`` for quiver plots."""
    return policy @ np.asarray(ACTIONS, dtype=float)
