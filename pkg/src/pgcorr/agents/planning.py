"""Exact planning and policy evaluation for tabular MDPs."""
from __future__ import annotations

import warnings

import numpy as np

from ..envs import TabularMdp
from ..errors import ConvergenceWarning


def value_iteration(mdp: TabularMdp, tol: float = 1e-8, max_iter: int = 10_000) -> np.ndarray:
    """Optimal Q-table; stops once the sup-norm Bellman residual drops below ``tol``.

    Hitting ``max_iter`` emits a :class:`ConvergenceWarning` and returns the
    last iterate.
    """
    T, R, g = mdp.transitions, mdp.rewards, mdp.gamma
    Q = np.zeros_like(R)
    for _ in range(max_iter):
        Q_new = R + g * (T @ Q.max(axis=1))
        resid = np.max(np.abs(Q_new - Q))
        Q = Q_new
        if resid < tol:
            return Q
    warnings.warn(f"value iteration did not converge in {max_iter} iterations", ConvergenceWarning)
    return Q


def greedy_policy(Q: np.ndarray) -> np.ndarray:
    """One-hot policy on the first maximizing action of each row."""
    P = np.zeros_like(Q)
    P[np.arange(Q.shape[0]), np.argmax(Q, axis=1)] = 1.0
    return P


def softmax_policy(Q: np.ndarray, beta: float) -> np.ndarray:
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    if np.isinf(beta):
        top = Q == Q.max(axis=1, keepdims=True)
        return top / top.sum(axis=1, keepdims=True)
    Z = beta * (Q - Q.max(axis=1, keepdims=True))
    P = np.exp(Z)
    return P / P.sum(axis=1, keepdims=True)


def policy_evaluation(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """State values of a stochastic policy by a direct linear solve."""
    P = np.einsum("sa,sat->st", policy, mdp.transitions)
    r = np.sum(policy * mdp.rewards, axis=1)
    return np.linalg.solve(np.eye(mdp.S) - mdp.gamma * P, r)


def optimal_policy(mdp: TabularMdp, tol: float = 1e-8) -> np.ndarray:
    return greedy_policy(value_iteration(mdp, tol=tol))


def finite_horizon_return(mdp: TabularMdp, policy: np.ndarray, steps: int) -> np.ndarray:
    """Expected undiscounted sum of ``steps`` rewards from every start state."""
    P = np.einsum("sa,sat->st", policy, mdp.transitions)
    r = np.sum(policy * mdp.rewards, axis=1)
    total = np.zeros(mdp.S)
    v = r.copy()
    for _ in range(steps):
        total += v
        v = P @ v
    return total
