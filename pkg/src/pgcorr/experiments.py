"""Scenario runners shared by the command line and the acceptance suite.

Each runner takes a validated config (see :mod:`pgcorr.config`) and one
seed, and returns a :class:`RunResult` holding metric tables.  Randomness
comes from named streams derived from the seed, so the environment side of
a run (rewards, demonstrations, random walks) is identical for the
correlated model and the Dirichlet baseline.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .agents.imitation import DemonstrationSet, imitation_fit, pg_policy, sample_demonstrations
from .agents.metrics import hellinger, value_loss
from .agents.planning import optimal_policy, softmax_policy, value_iteration
from .agents.psrl import (
    PlanningTemplate,
    TransitionBelief,
    average_finite_return,
    normalized_start_value,
    psrl_loop,
    transitions_to_reach,
)
from .agents.subgoal import action_model_table, subgoal_gibbs_vi
from .baselines import DirichletModel, dirichlet_posterior_mean
from .envs import (
    GridSpec,
    QueueNetSpec,
    bfs_distances,
    build_grid10,
    build_gridworld,
    build_queue_mdp,
    mdp_to_count_covariates,
    queue_step,
)
from .kernels import KernelSpec, grid_distance, queue_distance
from .pgvi import HyperParams, expected_probs, fit, uniform_prior_mean

STREAMS = ("env", "model", "gibbs", "psrl")


def rng_streams(seed: int) -> dict:
    """Independent generators keyed by consumer name.

    Each stream is seeded from ``(seed, crc32(name))``, so adding a new
    consumer never changes the numbers another stream produces.
    """
    return {
        name: np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))
        for name in STREAMS
    }


@dataclass
class RunResult:
    """Metric tables of one seed.

    ``tables`` maps a file stem to ``(header, rows)``; ``summary`` rows are
    ``(key, metric, value)`` triples used by run comparison; ``policy`` is
    the estimated grid policy when the scenario produces one.
    """

    tables: dict = field(default_factory=dict)
    summary: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    policy: np.ndarray | None = None
    positions: np.ndarray | None = None


def _grid_spec(env: dict, **extra) -> GridSpec:
    return GridSpec(width=env["width"], height=env["height"], noise=env["noise"], gamma=env["gamma"], **extra)


def _kernel(cfg: dict, D: np.ndarray) -> KernelSpec:
    k = cfg["kernel"]
    l = float(D.max()) if k["lengthscale"] == "max-distance" else float(k["lengthscale"])
    return KernelSpec(D, float(k["theta"]), l)


def _per_state_rows(h: np.ndarray) -> list:
    return [[s, float(v)] for s, v in enumerate(h)]


def run_imitation(cfg: dict, seed: int) -> RunResult:
    """Softmax expert on a random-reward grid, demonstrations on a fraction of states."""
    rng = rng_streams(seed)
    env, params = cfg["environment"], cfg["params"]
    S = env["width"] * env["height"]
    probe = _grid_spec(env)
    cells = rng["env"].choice(S, size=env["reward_cells"], replace=False)
    spec = _grid_spec(env, rewards={probe.cell(int(c)): float(env["reward_value"]) for c in cells})
    mdp = build_gridworld(spec)
    expert = softmax_policy(value_iteration(mdp), params["expert_beta"])
    n_states = max(1, int(round(params["coverage"] * S)))
    states = np.sort(rng["env"].choice(S, size=n_states, replace=False))
    demos = sample_demonstrations(expert, states, params["demos_per_state"], rng["env"])

    res = RunResult(positions=spec.positions())
    if cfg["model"] == "pg":
        k = cfg["kernel"]
        policy, fitres = pg_policy(
            demos.counts,
            _kernel(cfg, grid_distance(spec.positions())),
            em=k["em"],
            em_mu=k["em_mu"],
            optimize_lengthscale=k["optimize_lengthscale"],
            max_sweeps=k["sweeps"],
            tol=k["tol"],
        )
        res.checkpoints["policy_model"] = (fitres.hyper, fitres.posterior, fitres.elbo_trace)
    else:
        policy = imitation_fit(demos, "dirichlet")
    h = hellinger(policy, expert)
    loss = value_loss(policy, mdp, optimal_policy(mdp))
    res.policy = policy
    res.tables["hellinger"] = (["seed", "state", "hellinger"], [[seed] + r for r in _per_state_rows(h)])
    res.summary = [("all", "mean_hellinger", float(h.mean())), ("all", "value_loss", loss)]
    return res


def subgoal_spec(env: dict) -> GridSpec:
    walls = {(tuple(a), tuple(b)) for a, b in env["walls"]}
    goals = [tuple(g) for g in env["goals"]]
    return _grid_spec(env, walls=walls, rewards={g: 1.0 for g in goals})


def subgoal_expert(spec: GridSpec, goals, beta: float, table: np.ndarray | None = None) -> np.ndarray:
    """Expert that heads for its nearest goal (wall-respecting distance)."""
    if table is None:
        table = action_model_table(spec, list(range(spec.S)), beta)
    gidx = np.array([spec.index(g) for g in goals])
    near = gidx[np.argmin(bfs_distances(spec)[:, gidx], axis=1)]
    return table[near, np.arange(spec.S)]


def run_subgoal(cfg: dict, seed: int) -> RunResult:
    """Demonstrations from a goal-directed expert on the walled grid; all cells are candidate goals."""
    rng = rng_streams(seed)
    env, params = cfg["environment"], cfg["params"]
    spec = subgoal_spec(env)
    S = spec.S
    table = action_model_table(spec, list(range(S)), params["goal_beta"])
    expert = subgoal_expert(spec, [tuple(g) for g in env["goals"]], params["goal_beta"], table)
    n_states = max(1, int(round(params["coverage"] * S)))
    states = np.sort(rng["env"].choice(S, size=n_states, replace=False))
    demos = sample_demonstrations(expert, states, params["demos_per_state"], rng["env"])
    D = grid_distance(spec.positions())
    k = cfg["kernel"]

    res = RunResult(positions=spec.positions())
    if params["estimator"] == "imitation":
        if cfg["model"] == "pg":
            policy, fitres = pg_policy(
                demos.counts, _kernel(cfg, D), em=k["em"], em_mu=k["em_mu"],
                optimize_lengthscale=k["optimize_lengthscale"], max_sweeps=200, tol=k["tol"],
            )
        else:
            policy = imitation_fit(demos, "dirichlet")
    else:
        policy, _ = subgoal_gibbs_vi(
            demos,
            table,
            method=cfg["model"],
            kernel=_kernel(cfg, D) if cfg["model"] == "pg" else None,
            n_samples=params["gibbs_samples"],
            burn_in=params["burn_in"],
            rng=rng["gibbs"],
            use_likelihood=params["use_likelihood"],
            sweeps_per_iter=k["sweeps"],
            em=k["em"],
            em_mu=k["em_mu"],
        )
    h = hellinger(policy, expert)
    unseen = np.setdiff1d(np.arange(S), states)
    res.policy = policy
    res.tables["hellinger"] = (["seed", "state", "hellinger"], [[seed] + r for r in _per_state_rows(h)])
    res.summary = [
        ("all", "mean_hellinger", float(h.mean())),
        ("undemonstrated", "mean_hellinger", float(h[unseen].mean()) if unseen.size else 0.0),
    ]
    return res


def run_sysid(cfg: dict, seed: int) -> RunResult:
    """Random walk on Grid10; per-action transition models refit at each checkpoint."""
    rng = rng_streams(seed)
    env, params = cfg["environment"], cfg["params"]
    spec = _grid_spec(env)
    mdp = build_grid10(spec)
    S, A = mdp.S, mdp.A
    kernel = _kernel(cfg, grid_distance(spec.positions())) if cfg["model"] == "pg" else None
    k = cfg["kernel"]
    hypers = [HyperParams(uniform_prior_mean(S, S), kernel) for _ in range(A)] if kernel else None
    posts = [None] * A
    checkpoints = params["checkpoints"]
    s = mdp.reset
    traj = []
    rows = []
    res = RunResult()
    for n in range(1, checkpoints[-1] + 1):
        a = int(rng["env"].integers(A))
        s_next = mdp.step(s, a, rng["env"])
        traj.append((s, a, s_next))
        s = s_next
        if n not in checkpoints:
            continue
        Xs = mdp_to_count_covariates(traj, S, A)
        dist = []
        for a_ in range(A):
            if kernel is None:
                P = dirichlet_posterior_mean(DirichletModel(Xs[a_]))
            else:
                fr = fit(Xs[a_], hypers[a_], max_sweeps=k["sweeps"], tol=None, em=k["em"], em_mu=k["em_mu"], init=posts[a_])
                posts[a_], hypers[a_] = fr.posterior, fr.hyper
                P = expected_probs(fr.posterior)
            dist.append(hellinger(P, mdp.transitions[:, a_]))
        mean_h = float(np.mean(dist))
        rows.append([seed, n, mean_h])
        res.summary.append((str(n), "mean_hellinger", mean_h))
    if kernel is not None:
        for a_ in range(A):
            res.checkpoints[f"dynamics_action{a_}"] = (hypers[a_], posts[a_], [])
    res.tables["sysid"] = (["seed", "transitions", "mean_hellinger"], rows)
    return res


def _belief(cfg: dict, S: int, A: int, D: np.ndarray) -> TransitionBelief:
    k = cfg["kernel"]
    if cfg["model"] == "dirichlet":
        return TransitionBelief(S, A, "dirichlet")
    return TransitionBelief(S, A, "pg", _kernel(cfg, D), sweeps=k["sweeps"], em=k["em"], em_mu=k["em_mu"])


def run_brl_grid10(cfg: dict, seed: int) -> RunResult:
    """PSRL on Grid10 with known rewards; normalized start value after each replan."""
    rng = rng_streams(seed)
    env, params = cfg["environment"], cfg["params"]
    spec = _grid_spec(env)
    mdp = build_grid10(spec)
    belief = _belief(cfg, mdp.S, mdp.A, grid_distance(spec.positions()))
    template = PlanningTemplate(mdp.S, mdp.A, mdp.gamma, mdp.initial, rewards=mdp.rewards)
    trace = psrl_loop(
        mdp.step,
        belief,
        template,
        normalized_start_value(mdp),
        variant=params["variant"],
        replan_every=params["replan_every"],
        horizon_total=params["horizon"],
        rng=rng["psrl"],
        n_models=params["n_models"],
        env_rng=rng["env"],
    )
    reach = transitions_to_reach(trace, params["level"])
    res = RunResult()
    res.tables["returns"] = (
        ["seed", "transitions", "normalized_return"],
        [[seed, n, float(r)] for n, r in zip(trace.transitions, trace.returns)],
    )
    res.summary = [
        ("all", "transitions_to_level", reach),
        ("all", "final_normalized_return", float(trace.returns[-1])),
    ]
    return res


def run_brl_queueing(cfg: dict, seed: int) -> RunResult:
    """PSRL scheduling in the two-server queue; episodes start in uniformly random states."""
    rng = rng_streams(seed)
    env, params = cfg["environment"], cfg["params"]
    q = QueueNetSpec(
        env["B1"], env["B2"], env["arrival"], env["batch1"], env["batch2"], env["gamma"], env["clamp_transfer"]
    )
    mdp = build_queue_mdp(q)
    S = q.S
    belief = _belief(cfg, S, 2, queue_distance(q.states(), [q.B1, q.B2]))
    template = PlanningTemplate(S, 2, q.gamma, np.full(S, 1.0 / S), next_state_reward=q.state_reward())

    def step(s, a, g):
        return q.index(queue_step(q, q.state(s), a + 1, g)[0])

    L = params["episode_length"]
    trace = psrl_loop(
        step,
        belief,
        template,
        average_finite_return(mdp, params["eval_steps"]),
        variant=params["variant"],
        replan_every=L,
        horizon_total=params["episodes"] * L,
        rng=rng["psrl"],
        n_models=params["n_models"],
        reset=lambda g: int(g.integers(S)),
        env_rng=rng["env"],
    )
    res = RunResult()
    res.tables["returns"] = (
        ["seed", "episode", "transitions", "expected_return"],
        [[seed, n // L, n, float(r)] for n, r in zip(trace.transitions, trace.returns)],
    )
    res.summary = [("all", "final_expected_return", float(trace.returns[-1]))]
    return res


RUNNERS: dict[str, Callable[[dict, int], RunResult]] = {
    "imitation": run_imitation,
    "subgoal": run_subgoal,
    "sysid": run_sysid,
    "brl_grid10": run_brl_grid10,
    "brl_queueing": run_brl_queueing,
}


def run_scenario(cfg: dict, seed: int) -> RunResult:
    return RUNNERS[cfg["scenario"]](cfg, seed)
