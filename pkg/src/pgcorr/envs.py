"""Tabular environments: noisy gridworlds, Grid10 and a two-server batch queue."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import poisson

from .pgvi import CountMatrix

# north, east, south, west; y grows northwards
ACTIONS = ((0, 1), (1, 0), (0, -1), (-1, 0))
ACTION_NAMES = ("north", "east", "south", "west")


@dataclass
class TabularMdp:
    transitions: np.ndarray  # S x A x S
    rewards: np.ndarray  # S x A
    gamma: float = 0.95
    initial: Optional[np.ndarray] = None

    def __post_init__(self):
        T = np.asarray(self.transitions, dtype=float)
        if T.ndim != 3 or T.shape[0] != T.shape[2]:
            raise ValueError(f"transitions must be S x A x S, got {T.shape}")
        if np.any(T < 0) or not np.allclose(T.sum(axis=2), 1.0, atol=1e-10, rtol=0):
            raise ValueError("transition rows must be stochastic")
        self.transitions = T
        R = np.asarray(self.rewards, dtype=float)
        if R.ndim == 1:
            R = np.repeat(R[:, None], T.shape[1], axis=1)
        if R.shape != T.shape[:2]:
            raise ValueError(f"rewards must be S x A, got {R.shape}")
        self.rewards = R
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.initial is None:
            self.initial = np.full(T.shape[0], 1.0 / T.shape[0])
        self.initial = np.asarray(self.initial, dtype=float)

    @property
    def S(self) -> int:
        return self.transitions.shape[0]

    @property
    def A(self) -> int:
        return self.transitions.shape[1]

    def step(self, s: int, a: int, rng: np.random.Generator) -> int:
        return int(rng.choice(self.S, p=self.transitions[s, a]))

    def to_json(self) -> str:
        return json.dumps(
            {
                "S": self.S,
                "A": self.A,
                "gamma": self.gamma,
                "transitions": self.transitions.ravel().tolist(),
                "rewards": self.rewards.ravel().tolist(),
                "initial": self.initial.tolist(),
            }
        )


# ---------------------------------------------------------------------------
# gridworlds
# ---------------------------------------------------------------------------


@dataclass
class GridSpec:
    """Rectangular grid; ``walls`` holds blocked edges as pairs of cells.

    States are numbered ``s = y * width + x``.
    """

    width: int = 10
    height: int = 10
    walls: set = field(default_factory=set)
    rewards: dict = field(default_factory=dict)
    noise: float = 0.5
    gamma: float = 0.95

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid must be at least 1 x 1")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        self.walls = {frozenset(map(tuple, e)) for e in self.walls}
        for e in self.walls:
            a, b = tuple(e)
            if abs(a[0] - b[0]) + abs(a[1] - b[1]) != 1 or not (self.inside(a) and self.inside(b)):
                raise ValueError(f"wall {sorted(e)} is not an edge between adjacent cells")
        for cell in self.rewards:
            if not self.inside(cell):
                raise ValueError(f"reward cell {cell} lies outside the grid")

    @property
    def S(self) -> int:
        return self.width * self.height

    def inside(self, cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def index(self, cell) -> int:
        return cell[1] * self.width + cell[0]

    def cell(self, s: int) -> tuple:
        return (s % self.width, s // self.width)

    def positions(self) -> np.ndarray:
        return np.array([self.cell(s) for s in range(self.S)])

    def blocked(self, a, b) -> bool:
        return frozenset((tuple(a), tuple(b))) in self.walls

    def neighbours(self, cell) -> list:
        out = []
        for dx, dy in ACTIONS:
            n = (cell[0] + dx, cell[1] + dy)
            if self.inside(n) and not self.blocked(cell, n):
                out.append(n)
        return out

    def reward_vector(self) -> np.ndarray:
        r = np.zeros(self.S)
        for cell, v in self.rewards.items():
            r[self.index(cell)] = v
        return r


def bfs_distances(spec: GridSpec) -> np.ndarray:
    """All-pairs shortest-path lengths respecting walls (``inf`` if unreachable)."""
    D = np.full((spec.S, spec.S), np.inf)
    for src in range(spec.S):
        D[src, src] = 0
        queue = deque([spec.cell(src)])
        while queue:
            c = queue.popleft()
            dc = D[src, spec.index(c)]
            for n in spec.neighbours(c):
                j = spec.index(n)
                if D[src, j] == np.inf:
                    D[src, j] = dc + 1
                    queue.append(n)
    return D


def gridworld_transitions(spec: GridSpec) -> np.ndarray:
    """Discretized-Gaussian noisy moves.

    Each action targets the adjacent cell in its direction.  Mass
    ``exp(-|c - target|^2 / (2 noise^2))`` goes to every cell of the 3x3
    block around the target; cells that are off-grid or cannot be reached
    from the current cell without a detour around a wall pass their mass to
    the current cell.
    """
    S = spec.S
    D = bfs_distances(spec)
    T = np.zeros((S, len(ACTIONS), S))
    offsets = [(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    if spec.noise > 0:
        w = {o: np.exp(-(o[0] ** 2 + o[1] ** 2) / (2 * spec.noise**2)) for o in offsets}
    else:
        w = {o: float(o == (0, 0)) for o in offsets}
    for s in range(S):
        x, y = spec.cell(s)
        for a, (dx, dy) in enumerate(ACTIONS):
            tx, ty = x + dx, y + dy
            for o in offsets:
                if w[o] == 0.0:
                    continue
                c = (tx + o[0], ty + o[1])
                if spec.inside(c):
                    j = spec.index(c)
                    if D[s, j] == abs(c[0] - x) + abs(c[1] - y):
                        T[s, a, j] += w[o]
                        continue
                T[s, a, s] += w[o]
    return T / T.sum(axis=2, keepdims=True)


def build_gridworld(spec: GridSpec) -> TabularMdp:
    """Gridworld whose reward is collected on entering a reward cell."""
    T = gridworld_transitions(spec)
    R = T @ spec.reward_vector()
    return TabularMdp(T, R, spec.gamma)


@dataclass
class Grid10Mdp(TabularMdp):
    target: int = 0
    reset: int = 0


def build_grid10(spec: Optional[GridSpec] = None) -> Grid10Mdp:
    """Grid with +1 for reaching the far corner, which teleports to the start corner.

    Mass that would enter the target cell is rerouted to the opposite corner
    and pays reward 1, so the target itself is never occupied.
    """
    spec = spec or GridSpec()
    T = gridworld_transitions(spec)
    target = spec.index((spec.width - 1, spec.height - 1))
    reset = spec.index((0, 0))
    R = T[:, :, target].copy()
    T[:, :, reset] += T[:, :, target]
    T[:, :, target] = 0.0
    init = np.zeros(spec.S)
    init[reset] = 1.0
    return Grid10Mdp(T, R, spec.gamma, init, target=target, reset=reset)


# ---------------------------------------------------------------------------
# queueing network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QueueNetSpec:
    """Two queues in tandem: arrivals into queue 1, batch service into queue 2, then out.

    ``clamp_transfer`` limits the batch moved from queue 1 to the packets it
    actually holds; the default follows the literal update in which the raw
    batch size enters both queues.
    """

    B1: int = 10
    B2: int = 10
    arrival: float = 1.0
    batch1: float = 3.0
    batch2: float = 2.0
    gamma: float = 0.95
    clamp_transfer: bool = False

    def __post_init__(self):
        if min(self.B1, self.B2) < 1 or min(self.arrival, self.batch1, self.batch2) <= 0:
            raise ValueError("buffers and rates must be positive")

    @property
    def S(self) -> int:
        return (self.B1 + 1) * (self.B2 + 1)

    def index(self, b) -> int:
        return int(b[0]) * (self.B2 + 1) + int(b[1])

    def state(self, s: int) -> tuple:
        return (s // (self.B2 + 1), s % (self.B2 + 1))

    def states(self) -> np.ndarray:
        return np.array([self.state(s) for s in range(self.S)])

    def state_reward(self) -> np.ndarray:
        return -self.states().sum(axis=1).astype(float)

    def rates(self, a: int) -> tuple:
        """Poisson rates ``(q1, q2, q3)`` under action ``a`` in {1, 2}."""
        if a not in (1, 2):
            raise ValueError(f"queue action must be 1 or 2, got {a!r}")
        return self.arrival, self.batch1 * (a == 1), self.batch2 * (a == 2)


def poisson_inverse(rate: float, rng: np.random.Generator) -> int:
    """Poisson variate by sequential inversion of the CDF (one uniform per draw)."""
    u = rng.random()
    if rate <= 0:
        return 0
    k = 0
    p = np.exp(-rate)
    cdf = p
    while u > cdf and p > 0:
        k += 1
        p *= rate / k
        cdf += p
    return k


def _queue_next(spec: QueueNetSpec, b1, b2, q1, q2, q3):
    if spec.clamp_transfer:
        q2 = np.minimum(q2, b1 + q1)
    n1 = np.clip(b1 + q1 - q2, 0, spec.B1)
    n2 = np.clip(b2 + q2 - q3, 0, spec.B2)
    return n1, n2


def queue_step(spec: QueueNetSpec, b, a: int, rng: np.random.Generator):
    """Simulate one step; returns the next queue vector and reward ``-(b1' + b2')``."""
    r1, r2, r3 = spec.rates(a)
    q1 = poisson_inverse(r1, rng)
    q2 = poisson_inverse(r2, rng)
    q3 = poisson_inverse(r3, rng)
    n1, n2 = _queue_next(spec, b[0], b[1], q1, q2, q3)
    return (int(n1), int(n2)), -float(n1 + n2)


def _truncated_pmf(rate: float, tail: float = 1e-12) -> np.ndarray:
    if rate <= 0:
        return np.ones(1)
    hi = int(poisson.ppf(1.0 - tail, rate)) + 1
    return poisson.pmf(np.arange(hi + 1), rate)


def queue_exact_row(spec: QueueNetSpec, b, a: int) -> np.ndarray:
    """Exact next-state distribution by enumerating Poisson triples.

    Tails beyond cumulative mass ``1 - 1e-12`` are dropped and the row is
    renormalized.  Only for ground truth and testing; agents never see it.
    """
    p1, p2, p3 = (_truncated_pmf(r) for r in spec.rates(a))
    q1, q2, q3 = np.meshgrid(np.arange(len(p1)), np.arange(len(p2)), np.arange(len(p3)), indexing="ij")
    mass = p1[:, None, None] * p2[None, :, None] * p3[None, None, :]
    n1, n2 = _queue_next(spec, b[0], b[1], q1, q2, q3)
    row = np.bincount((n1 * (spec.B2 + 1) + n2).ravel(), weights=mass.ravel(), minlength=spec.S)
    return row / row.sum()


def build_queue_mdp(spec: QueueNetSpec) -> TabularMdp:
    """Ground-truth MDP; action index 0 serves queue 1 and index 1 serves queue 2."""
    T = np.zeros((spec.S, 2, spec.S))
    for s in range(spec.S):
        for a in (1, 2):
            T[s, a - 1] = queue_exact_row(spec, spec.state(s), a)
    R = T @ spec.state_reward()
    return TabularMdp(T, R, spec.gamma)


# ---------------------------------------------------------------------------
# data summaries
# ---------------------------------------------------------------------------


def mdp_to_count_covariates(trajectory: Iterable[Sequence[int]], S: int, A: int) -> list:
    """Per-action ``S x S`` transition count matrices from ``(s, a, s')`` triples."""
    counts = np.zeros((A, S, S), dtype=np.int64)
    for s, a, s2 in trajectory:
        counts[a, s, s2] += 1
    return [CountMatrix(counts[a]) for a in range(A)]
