"""Posterior-sampling reinforcement learning over per-action transition beliefs.

The agent knows the reward structure but not the dynamics.  Each action's
next-state distributions are modelled either by the correlated
stick-breaking model over states (``"pg"``) or by independent Dirichlet
rows (``"dirichlet"``).  Two planners are provided: a sampled variant that
scores several candidate policies on several posterior draws, and a greedy
variant that plans once against the posterior mean.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..baselines import DirichletModel, dirichlet_posterior_mean, dirichlet_posterior_sample
from ..envs import TabularMdp
from ..kernels import KernelSpec
from ..pgvi import CountMatrix, HyperParams, expected_probs, fit, posterior_sample_probs, uniform_prior_mean
from .planning import finite_horizon_return, greedy_policy, policy_evaluation, value_iteration


@dataclass
class PlanningTemplate:
    """Everything about the MDP except its dynamics.

    Rewards are either a fixed ``S x A`` table or a per-next-state vector
    whose expectation under the modelled dynamics gives ``R(s, a)``.
    """

    S: int
    A: int
    gamma: float
    start: np.ndarray  # distribution used to score candidate policies
    rewards: Optional[np.ndarray] = None
    next_state_reward: Optional[np.ndarray] = None

    def __post_init__(self):
        if (self.rewards is None) == (self.next_state_reward is None):
            raise ValueError("give exactly one of rewards and next_state_reward")
        self.start = np.asarray(self.start, dtype=float)

    def assemble(self, T: np.ndarray) -> TabularMdp:
        """MDP with dynamics ``T`` (shape ``S x A x S``)."""
        R = self.rewards if self.rewards is not None else T @ self.next_state_reward
        return TabularMdp(T, R, self.gamma, self.start)


@dataclass
class TransitionBelief:
    """Posterior over the dynamics of every action.

    For ``method="pg"`` each refit warm-starts from the previous posterior
    and runs ``sweeps`` EM sweeps.
    """

    S: int
    A: int
    method: str = "pg"
    kernel: Optional[KernelSpec] = None
    sweeps: int = 5
    em: bool = True
    em_mu: bool = True
    counts: np.ndarray = field(init=False)
    _hyper: list = field(init=False, repr=False)
    _post: list = field(init=False, repr=False)

    def __post_init__(self):
        if self.method not in ("pg", "dirichlet"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "pg" and self.kernel is None:
            raise ValueError("the pg method needs a kernel over states")
        self.counts = np.zeros((self.A, self.S, self.S), dtype=np.int64)
        if self.method == "pg":
            self._hyper = [HyperParams(uniform_prior_mean(self.S, self.S), self.kernel) for _ in range(self.A)]
        self._post = [None] * self.A

    def observe(self, s: int, a: int, s_next: int) -> None:
        self.counts[a, s, s_next] += 1

    def refit(self) -> None:
        if self.method != "pg":
            return
        for a in range(self.A):
            res = fit(
                CountMatrix(self.counts[a]),
                self._hyper[a],
                max_sweeps=self.sweeps,
                tol=None,
                em=self.em,
                em_mu=self.em_mu,
                init=self._post[a],
            )
            self._post[a], self._hyper[a] = res.posterior, res.hyper

    def _posterior(self, a: int):
        if self._post[a] is None:
            self.refit()
        return self._post[a]

    def mean(self) -> np.ndarray:
        """Posterior-mean dynamics, shape ``S x A x S``."""
        if self.method == "dirichlet":
            rows = [dirichlet_posterior_mean(DirichletModel(self.counts[a])) for a in range(self.A)]
        else:
            rows = [expected_probs(self._posterior(a)) for a in range(self.A)]
        return np.stack(rows, axis=1)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """One joint posterior draw of the dynamics, shape ``S x A x S``."""
        if self.method == "dirichlet":
            rows = [dirichlet_posterior_sample(DirichletModel(self.counts[a]), rng) for a in range(self.A)]
        else:
            rows = [posterior_sample_probs(self._posterior(a), rng) for a in range(self.A)]
        T = np.stack(rows, axis=1)
        return T / T.sum(axis=2, keepdims=True)


def psrl_step_sampled(belief: TransitionBelief, template: PlanningTemplate, n_models: int, rng) -> np.ndarray:
    """Best of ``n_models`` sampled-model optimal policies, averaged over all samples.

    Every candidate is scored by its start-distribution-weighted value under
    each sampled model; the highest mean score wins and ties go to the
    earliest candidate.
    """
    if n_models < 1:
        raise ValueError("n_models must be >= 1")
    mdps = [template.assemble(belief.sample(rng)) for _ in range(n_models)]
    candidates = [greedy_policy(value_iteration(m)) for m in mdps]
    scores = np.array([[template.start @ policy_evaluation(m, pi) for m in mdps] for pi in candidates])
    return candidates[int(np.argmax(scores.mean(axis=1)))]


def psrl_step_mean(belief: TransitionBelief, template: PlanningTemplate) -> np.ndarray:
    """Greedy policy of the posterior-mean MDP."""
    return greedy_policy(value_iteration(template.assemble(belief.mean())))


def normalized_start_value(true_mdp: TabularMdp) -> Callable[[np.ndarray], float]:
    """Evaluator: start value of a policy divided by the optimal start value."""
    best = float(true_mdp.initial @ policy_evaluation(true_mdp, greedy_policy(value_iteration(true_mdp))))

    def evaluate(policy: np.ndarray) -> float:
        return float(true_mdp.initial @ policy_evaluation(true_mdp, policy)) / best

    return evaluate


def average_finite_return(true_mdp: TabularMdp, steps: int = 1000) -> Callable[[np.ndarray], float]:
    """Evaluator: expected undiscounted ``steps``-step return averaged over all start states."""

    def evaluate(policy: np.ndarray) -> float:
        return float(np.mean(finite_horizon_return(true_mdp, policy, steps)))

    return evaluate


@dataclass
class PsrlTrace:
    transitions: list = field(default_factory=list)  # data seen when each policy was chosen
    returns: list = field(default_factory=list)


def psrl_loop(
    step: Callable[[int, int, np.random.Generator], int],
    belief: TransitionBelief,
    template: PlanningTemplate,
    evaluate: Callable[[np.ndarray], float],
    variant: str = "mean",
    replan_every: int = 50,
    horizon_total: int = 2000,
    rng=None,
    n_models: int = 10,
    reset: Optional[Callable[[np.random.Generator], int]] = None,
    env_rng=None,
) -> PsrlTrace:
    """Act, count, refit and replan every ``replan_every`` transitions.

    ``step(s, a, rng)`` simulates the true environment.  With ``reset``
    given, each block of ``replan_every`` transitions is an episode starting
    from ``reset(rng)``; otherwise the agent continues from where it stopped,
    beginning at a draw from ``template.start``.  After each replan the new
    policy is scored by ``evaluate`` and appended to the trace together with
    the number of transitions observed so far; a last entry scores the
    policy planned from all ``horizon_total`` transitions.  ``env_rng`` drives the
    environment (start states and transitions) and defaults to ``rng``,
    which otherwise drives posterior sampling.
    """
    if replan_every < 1:
        raise ValueError("replan_every must be >= 1")
    if variant not in ("sampled", "mean"):
        raise ValueError(f"unknown PSRL variant {variant!r}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    env_rng = rng if env_rng is None else env_rng
    trace = PsrlTrace()
    if horizon_total <= 0:
        return trace
    s = int(env_rng.choice(template.S, p=template.start)) if reset is None else None
    def plan():
        belief.refit()
        if variant == "sampled":
            return psrl_step_sampled(belief, template, n_models, rng)
        return psrl_step_mean(belief, template)

    done = 0
    while done < horizon_total:
        policy = plan()
        trace.transitions.append(done)
        trace.returns.append(evaluate(policy))
        actions = np.argmax(policy, axis=1)
        if reset is not None:
            s = reset(env_rng)
        for _ in range(min(replan_every, horizon_total - done)):
            a = int(actions[s])
            s_next = step(s, a, env_rng)
            belief.observe(s, a, s_next)
            s = s_next
            done += 1
    # the policy built from all collected data closes the trace
    trace.transitions.append(done)
    trace.returns.append(evaluate(plan()))
    return trace


def transitions_to_reach(trace: PsrlTrace, level: float = 0.9) -> float:
    """Data count at the first policy scoring at least ``level``; ``inf`` if never."""
    for n, r in zip(trace.transitions, trace.returns):
        if r >= level:
            return float(n)
    return float("inf")
