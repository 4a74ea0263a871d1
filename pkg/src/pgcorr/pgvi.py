"""Variational inference for logistic stick-breaking multinomial models.

The latent Gaussian fields ``psi[:, k]`` (one per stick, ``k < K-1``) share a
covariance over the covariate set.  Polya-Gamma augmentation turns each
stick's binomial likelihood into a Gaussian one, which gives closed-form
coordinate-ascent updates for a mean-field posterior

    q(psi, omega) = prod_k N(psi[:, k] | lam[:, k], V[k]) * prod_ck PG(omega_ck | b_ck, w_ck)

and closed-form or gradient-based hyper-parameter updates (variational EM).

Array conventions: per-covariate quantities are ``C x (K-1)`` matrices whose
column ``k`` belongs to stick ``k``; the stick covariances are stacked as a
``(K-1) x C x C`` array.  Within one sweep the stick updates are run
sequentially; they only read ``w`` from the previous omega update, so the
order does not affect the result.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Union

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import expit, gammaln, log_expit

from .errors import NumericalError
from .kernels import KernelSpec, jittered_cholesky

logger = logging.getLogger(__name__)

PG_SERIES_THRESHOLD = 1e-4


# ---------------------------------------------------------------------------
# stick-breaking
# ---------------------------------------------------------------------------


def stick_breaking_transform(zeta) -> np.ndarray:
    """Map ``(..., K-1)`` real vectors to ``(..., K)`` probability vectors.

    Entry ``k < K-1`` is ``sigmoid(zeta_k) * prod_{j<k} (1 - sigmoid(zeta_j))``
    and the last entry is the remaining stick.  Evaluated in log space so
    large-magnitude inputs neither overflow nor underflow prematurely.
    """
    zeta = np.asarray(zeta, dtype=float)
    if zeta.shape[-1] < 1:
        raise ValueError("need at least one stick (K >= 2)")
    if not np.all(np.isfinite(zeta)):
        raise ValueError("stick-breaking input must be finite")
    log_rest = np.cumsum(log_expit(-zeta), axis=-1)
    log_prev = np.concatenate([np.zeros(zeta.shape[:-1] + (1,)), log_rest[..., :-1]], axis=-1)
    head = np.exp(log_expit(zeta) + log_prev)
    tail = np.exp(log_rest[..., -1:])
    return np.concatenate([head, tail], axis=-1)


def inverse_stick_breaking(p) -> np.ndarray:
    """Inverse of :func:`stick_breaking_transform` for strictly positive ``p``."""
    p = np.asarray(p, dtype=float)
    p = p / p.sum(axis=-1, keepdims=True)
    remaining = 1.0 - np.concatenate(
        [np.zeros(p.shape[:-1] + (1,)), np.cumsum(p[..., :-2], axis=-1)], axis=-1
    )
    frac = np.clip(p[..., :-1] / remaining, 1e-300, 1.0 - 1e-16)
    return np.log(frac) - np.log1p(-frac)


def uniform_prior_mean(C: int, K: int) -> np.ndarray:
    """Prior means whose stick-breaking image is the uniform distribution."""
    return np.tile(inverse_stick_breaking(np.full(K, 1.0 / K)), (C, 1))


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CountMatrix:
    """``C x K`` nonnegative integer counts, one multinomial row per covariate."""

    counts: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.counts)
        if X.ndim != 2:
            raise ValueError(f"counts must be 2-D, got shape {X.shape}")
        C, K = X.shape
        if C < 1 or K < 2:
            raise ValueError(f"need C >= 1 and K >= 2, got C={C}, K={K}")
        if not np.all(np.isfinite(X)) or np.any(X < 0) or np.any(X != np.round(X)):
            raise ValueError("counts must be nonnegative integers")
        object.__setattr__(self, "counts", X.astype(np.int64))

    @property
    def C(self) -> int:
        return self.counts.shape[0]

    @property
    def K(self) -> int:
        return self.counts.shape[1]

    @property
    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)


@dataclass(frozen=True)
class StickStats:
    """Binomial trial counts ``b`` and centered successes ``kappa`` per stick."""

    b: np.ndarray
    kappa: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return self.kappa + self.b / 2.0


def compute_stick_stats(X: Union[CountMatrix, np.ndarray]) -> StickStats:
    if not isinstance(X, CountMatrix):
        X = CountMatrix(X)
    counts = X.counts.astype(float)
    N = counts.sum(axis=1, keepdims=True)
    before = np.concatenate([np.zeros((X.C, 1)), np.cumsum(counts[:, :-2], axis=1)], axis=1)
    b = N - before
    kappa = counts[:, :-1] - b / 2.0
    return StickStats(b=b, kappa=kappa)


def pg_mean(b, w):
    """First moment ``b / (2w) * tanh(w/2)`` of ``PG(b, w)``.

    Below ``w = 1e-4`` the series ``b/4 * (1 - w^2/12)`` is used.
    """
    b = np.asarray(b, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(b < 0) or np.any(w < 0):
        raise ValueError("pg_mean requires b >= 0 and w >= 0")
    small = w < PG_SERIES_THRESHOLD
    w_safe = np.where(small, 1.0, w)
    out = np.where(small, 0.25 * b * (1.0 - w**2 / 12.0), b / (2.0 * w_safe) * np.tanh(w_safe / 2.0))
    return out[()] if out.ndim == 0 else out


def log_cosh_half(w: np.ndarray) -> np.ndarray:
    """``log(cosh(w/2))`` without overflow."""
    a = np.abs(np.asarray(w, dtype=float)) / 2.0
    return a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)


# ---------------------------------------------------------------------------
# model state
# ---------------------------------------------------------------------------


@dataclass
class HyperParams:
    """Prior means (``C x (K-1)``) and the kernel generating the shared covariance."""

    mu: np.ndarray
    kernel: KernelSpec

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        if self.mu.ndim != 2 or self.mu.shape[0] != self.kernel.size:
            raise ValueError(
                f"mu must have shape (C, K-1) with C={self.kernel.size}, got {self.mu.shape}"
            )

    @property
    def sigma(self) -> np.ndarray:
        return self.kernel.covariance()

    @property
    def sigma_chol(self) -> np.ndarray:
        return np.sqrt(self.kernel.theta) * self.kernel.base.chol

    @property
    def sigma_logdet(self) -> float:
        return self.kernel.size * np.log(self.kernel.theta) + self.kernel.base.logdet

    def copy(self) -> "HyperParams":
        return HyperParams(self.mu.copy(), self.kernel)


@dataclass
class VariationalPosterior:
    """Gaussian stick factors ``N(lam[:, k], V[k])`` and PG parameters ``w``."""

    lam: np.ndarray
    V: np.ndarray
    w: np.ndarray
    stats: StickStats

    @property
    def C(self) -> int:
        return self.lam.shape[0]

    @property
    def K(self) -> int:
        return self.lam.shape[1] + 1

    @property
    def second_moment(self) -> np.ndarray:
        """``E[psi_ck^2]`` under q."""
        return np.diagonal(self.V, axis1=1, axis2=2).T + self.lam**2

    @cached_property
    def V_chol(self) -> np.ndarray:
        return np.stack([jittered_cholesky(Vk, name=f"V[{k}]")[0] for k, Vk in enumerate(self.V)])

    def copy(self) -> "VariationalPosterior":
        return VariationalPosterior(self.lam.copy(), self.V.copy(), self.w.copy(), self.stats)


def prior_posterior(stats: StickStats, hyper: HyperParams) -> VariationalPosterior:
    """Initial state: every factor equal to the prior, ``w`` consistent with it."""
    Km1 = stats.b.shape[1]
    if hyper.mu.shape[1] != Km1:
        raise ValueError(f"mu has {hyper.mu.shape[1]} sticks, data has {Km1}")
    S = hyper.sigma
    post = VariationalPosterior(
        lam=hyper.mu.copy(),
        V=np.repeat(S[None], Km1, axis=0),
        w=np.zeros_like(stats.b),
        stats=stats,
    )
    post.w = update_omega(post)
    return post


# ---------------------------------------------------------------------------
# coordinate-ascent updates
# ---------------------------------------------------------------------------


def update_factor(k: int, stats: StickStats, hyper: HyperParams, post: VariationalPosterior, omega=None):
    """Optimal Gaussian factor for stick ``k`` given the current PG parameters.

    Computes ``V = (Sigma^-1 + diag(E[omega]))^-1`` and
    ``lam = V (kappa + Sigma^-1 mu)`` through the equivalent form
    ``V = Sigma - Sigma W B^-1 W Sigma`` with ``W = diag(sqrt(E[omega]))`` and
    ``B = I + W Sigma W``.  ``B`` has eigenvalues >= 1, so no inverse of a
    possibly ill-conditioned ``Sigma`` is ever formed.

    ``omega`` optionally supplies the precomputed ``E[omega]`` column.

    Returns
    -------
    lam_k : ndarray, shape (C,)
    V_k : ndarray, shape (C, C)
    """
    S = hyper.sigma
    mu = hyper.mu[:, k]
    kappa = stats.kappa[:, k]
    if omega is None:
        omega = pg_mean(stats.b[:, k], post.w[:, k])
    s = np.sqrt(omega)
    # covariates without trials (b = 0) have E[omega] = 0 and drop out of B
    active = np.flatnonzero(s > 0)
    if active.size == 0:
        return mu.copy(), S.copy()
    sa = s[active]
    B = np.eye(active.size) + sa[:, None] * S[np.ix_(active, active)] * sa[None, :]
    try:
        LB = np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        raise NumericalError(f"precision factorization failed for stick {k}") from None
    A = solve_triangular(LB, sa[:, None] * S[active], lower=True, check_finite=False)
    V = S - A.T @ A
    V = 0.5 * (V + V.T)
    Sk = S @ kappa
    rhs = sa * (Sk + mu)[active]
    lam = mu + Sk - A.T @ solve_triangular(LB, rhs, lower=True, check_finite=False)
    if not np.all(np.isfinite(lam)):
        raise NumericalError(f"non-finite mean for stick {k}")
    return lam, V


def update_factors(stats: StickStats, hyper: HyperParams, post: VariationalPosterior) -> None:
    """Update every Gaussian factor in place."""
    omega = pg_mean(stats.b, post.w)
    for k in range(post.K - 1):
        post.lam[:, k], post.V[k] = update_factor(k, stats, hyper, post, omega[:, k])
    post.__dict__.pop("V_chol", None)


def update_omega(post: VariationalPosterior) -> np.ndarray:
    """Optimal PG parameters ``w_ck = sqrt(V_k[c, c] + lam_ck^2)``."""
    return np.sqrt(np.maximum(post.second_moment, 0.0))


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def _sigma_solve(hyper: HyperParams, B: np.ndarray) -> np.ndarray:
    return cho_solve((hyper.sigma_chol, True), B, check_finite=False)


def log_binom(n, k) -> np.ndarray:
    return gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)


def elbo(stats: StickStats, hyper: HyperParams, post: VariationalPosterior) -> float:
    """Evidence lower bound of the augmented mean-field posterior.

    Equals ``-sum_k KL(q(psi_k) || p(psi_k))`` plus the PG-augmented
    likelihood terms.  The extra term ``-1/2 sum E[omega](E[psi^2] - w^2)``
    keeps the bound valid when ``w`` is stale; it vanishes right after
    :func:`update_omega`.
    """
    C, Km1 = post.lam.shape
    logdet_S = hyper.sigma_logdet
    sign, logdet_V = np.linalg.slogdet(post.V)
    if np.any(sign <= 0):
        raise NumericalError("a posterior covariance is not positive definite")
    # tr(Sigma^-1 V_k) for all k in one solve
    SinvV = _sigma_solve(hyper, np.concatenate(list(post.V), axis=1)).reshape(C, Km1, C)
    traces = np.einsum("ckc->k", SinvV)
    d = hyper.mu - post.lam
    quad = np.sum(d * _sigma_solve(hyper, d), axis=0)
    kl = 0.5 * (traces + quad - C + logdet_S - logdet_V)

    b, kappa = stats.b, stats.kappa
    x = stats.x
    Ew = pg_mean(b, post.w)
    lik = (
        np.sum(log_binom(b, x))
        - np.log(2.0) * np.sum(b)
        + np.sum(post.lam * kappa)
        - np.sum(b * log_cosh_half(post.w))
        - 0.5 * np.sum(Ew * (post.second_moment - post.w**2))
    )
    return float(lik - np.sum(kl))


# ---------------------------------------------------------------------------
# hyper-parameters
# ---------------------------------------------------------------------------


def m_step_mu(post: VariationalPosterior) -> np.ndarray:
    """Prior means maximizing the ELBO: ``mu_k = lam_k``."""
    return post.lam.copy()


def m_step_theta_scale(post: VariationalPosterior, hyper: HyperParams, divisor: str = "exact") -> float:
    """Closed-form ELBO-optimal kernel scale for ``Sigma = theta * Sigma_unit``.

    ``divisor="exact"`` divides the summed traces by ``(K-1) C``, the
    stationary point of the ELBO.  ``divisor="KC"`` reproduces the published
    constant ``K C``, which is biased low by a factor ``(K-1)/K``.
    """
    C, Km1 = post.lam.shape
    base = hyper.kernel.base
    d = hyper.mu - post.lam
    M = post.V.sum(axis=0) + d @ d.T
    total = float(np.trace(cho_solve((base.chol, True), M, check_finite=False)))
    if divisor == "exact":
        denom = Km1 * C
    elif divisor == "KC":
        denom = (Km1 + 1) * C
    else:
        raise ValueError(f"unknown divisor {divisor!r}")
    theta = total / denom
    assert theta > 0, theta
    return theta


def elbo_grad_theta(post: VariationalPosterior, hyper: HyperParams, param: str = "theta") -> float:
    """Analytic ELBO derivative with respect to ``theta`` or ``lengthscale``."""
    C, Km1 = post.lam.shape
    kern = hyper.kernel
    if param == "theta":
        dS = kern.base.matrix
    elif param == "lengthscale":
        dS = kern.theta * kern.unit_covariance_grad()
    else:
        raise ValueError(f"unknown kernel parameter {param!r}")
    G = _sigma_solve(hyper, dS)  # Sigma^-1 dS
    SinvV = _sigma_solve(hyper, np.concatenate(list(post.V), axis=1)).reshape(C, Km1, C)
    # tr(Sigma^-1 dS Sigma^-1 V_k) = sum_ij G_ij (Sigma^-1 V_k)_ji
    tr_GV = np.einsum("ij,jki->k", G, SinvV)
    y = _sigma_solve(hyper, hyper.mu - post.lam)
    quad = np.einsum("ik,ij,jk->k", y, dS, y)
    return float(-0.5 * np.sum(np.trace(G) - tr_GV - quad))


def _lengthscale_step(stats, hyper, post, current: float) -> tuple[HyperParams, float]:
    """One backtracking gradient step on the length-scale."""
    g = elbo_grad_theta(post, hyper, "lengthscale")
    if g == 0.0:
        return hyper, current
    l0 = hyper.kernel.lengthscale
    step = 0.1 * l0
    for _ in range(20):
        l1 = l0 + np.sign(g) * step
        if l1 > 0:
            try:
                cand = HyperParams(hyper.mu, hyper.kernel.with_lengthscale(l1))
                val = elbo(stats, cand, post)
            except NumericalError:
                val = -np.inf
            if val > current:
                return cand, val
        step *= 0.5
    return hyper, current


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    posterior: VariationalPosterior
    hyper: HyperParams
    elbo_trace: list = field(default_factory=list)
    converged: bool = False
    n_sweeps: int = 0


def fit(
    X: Union[CountMatrix, np.ndarray],
    hyper: HyperParams,
    max_sweeps: int = 500,
    tol: float = 1e-6,
    em: bool = False,
    em_mu: bool = True,
    optimize_lengthscale: bool = False,
    init: Optional[VariationalPosterior] = None,
) -> FitResult:
    """Coordinate-ascent VI, optionally interleaved with variational EM.

    One sweep updates every Gaussian factor and then every PG parameter.
    With ``em`` set, each sweep is followed by the mean update (if
    ``em_mu``), the closed-form scale update and, if requested, one
    length-scale gradient step.  Iteration stops once the ELBO changes by
    less than ``tol`` relative to ``max(|ELBO|, 1)``; ``tol=None`` skips the
    ELBO altogether and runs exactly ``max_sweeps`` sweeps.  ``init`` warm-starts
    from an earlier posterior (its ``stats`` are replaced by those of ``X``).
    """
    stats = compute_stick_stats(X)
    hyper = hyper.copy()
    if init is None:
        post = prior_posterior(stats, hyper)
    else:
        if init.lam.shape != stats.b.shape:
            raise ValueError(f"warm start has shape {init.lam.shape}, data needs {stats.b.shape}")
        post = VariationalPosterior(init.lam.copy(), init.V.copy(), init.w.copy(), stats)
    track = tol is not None
    trace = [elbo(stats, hyper, post)] if track else []
    converged = False
    n = 0
    for n in range(1, max_sweeps + 1):
        update_factors(stats, hyper, post)
        post.w = update_omega(post)
        if em:
            if em_mu:
                hyper.mu = m_step_mu(post)
            hyper.kernel = hyper.kernel.with_theta(m_step_theta_scale(post, hyper))
            if optimize_lengthscale:
                hyper, _ = _lengthscale_step(stats, hyper, post, elbo(stats, hyper, post))
        if not track:
            continue
        trace.append(elbo(stats, hyper, post))
        if abs(trace[-1] - trace[-2]) <= tol * max(abs(trace[-2]), 1.0):
            converged = True
            break
    if track and not converged:
        logger.info("fit stopped after %d sweeps without reaching tol=%g", n, tol)
    return FitResult(post, hyper, trace, converged, n)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def _as_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def sample_psi(post: VariationalPosterior, rng, size: int = 1) -> np.ndarray:
    """Joint draws of the latent field, shape ``(size, C, K-1)``."""
    rng = _as_rng(rng)
    C, Km1 = post.lam.shape
    z = rng.standard_normal((Km1, C, size))
    return post.lam[None] + np.einsum("kij,kjn->nik", post.V_chol, z)


def posterior_sample_probs(post: VariationalPosterior, rng) -> np.ndarray:
    """One ``C x K`` probability matrix drawn from the variational posterior."""
    return stick_breaking_transform(sample_psi(post, rng, 1)[0])


def posterior_mean_probs(post: VariationalPosterior, n_samples: int = 1000, rng=0, chunk: int = 250) -> np.ndarray:
    """Monte Carlo estimate of ``E_q[stick_breaking(psi_c)]`` from joint draws."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = _as_rng(rng)
    total = np.zeros((post.C, post.K))
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        total += stick_breaking_transform(sample_psi(post, rng, m)).sum(axis=0)
        done += m
    return total / n_samples


def expected_probs(post: VariationalPosterior, order: int = 48) -> np.ndarray:
    """``E_q[stick_breaking(psi_c)]`` by Gauss-Hermite quadrature.

    The sticks are independent under the mean-field posterior, so the
    expectation factorizes into one-dimensional integrals of the logistic
    function against ``N(lam_ck, V_k[c, c])``.
    """
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    weights = weights / weights.sum()
    sd = np.sqrt(np.maximum(np.diagonal(post.V, axis1=1, axis2=2).T, 0.0))
    psi = post.lam[..., None] + sd[..., None] * nodes
    e_pos = expit(psi) @ weights
    e_neg = expit(-psi) @ weights
    rest = np.cumprod(e_neg, axis=1)
    prev = np.concatenate([np.ones((post.C, 1)), rest[:, :-1]], axis=1)
    probs = np.concatenate([e_pos * prev, rest[:, -1:]], axis=1)
    return probs / probs.sum(axis=1, keepdims=True)
