"""Numerical evaluation of PAC-Bayesian meta-learning bounds.

Covers the complexity term ``C(delta, lambda, beta)`` for bounded and
sub-gamma losses, the PACOH bound ``-(1/lambda + 1/(n beta)) log Z^II + C``,
the per-task bound ``-(1/(n beta)) sum_i E_P[log Z_beta(S_i, P)] + C``, their
difference ``Delta``, closed forms for the linear-regression case study and
exact / Monte-Carlo generalised marginal likelihoods for the 0-1 loss of
linear classifiers.

Hyper-prior expectations are Monte-Carlo averages over ``mc_priors`` prior
draws. All bounds are computed from one ``(mc_priors, n)`` matrix of
``log Z_beta(S_i, P_k)`` values so that PACOH and per-task bounds share
their samples.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

from .environments import TaskDataset, sigmoid
from .numerics import LOG_2PI, RngStream, cholesky_jittered, cholesky_logdet_solve, logsumexp


class OutOfValidityWindow(ValueError):
    """A sub-gamma CGF bound is used outside the range where it holds."""


class InvalidRange(ValueError):
    """Loss range with ``b < a``."""


class EffectiveSampleSizeTooLow(RuntimeError):
    """Self-normalised importance weights degenerated."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundedLoss:
    a: float = 0.0
    b: float = 1.0


@dataclass(frozen=True)
class SubGammaLoss:
    s1_sq: float
    c1: float
    s2_sq: float
    c2: float


@dataclass(frozen=True)
class BoundConfig:
    """Sample sizes, temperatures, confidence and loss model of one bound evaluation."""

    n: int
    m: int
    lam: float
    beta: float
    delta: float = 0.1
    loss_model: BoundedLoss | SubGammaLoss = BoundedLoss()
    mc_priors: int = 2000
    mc_seed: int = 0

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if self.n < 1 or self.m < 1 or self.lam <= 0 or self.beta <= 0:
            raise ValueError("n, m, lambda and beta must be positive")

    @classmethod
    def with_mode(cls, n: int, m: int, mode: str = "sqrt", **kw) -> "BoundConfig":
        """``mode="sqrt"`` gives ``(sqrt(n), sqrt(m))``, ``"n_m"`` gives ``(n, m)``."""
        if mode == "sqrt":
            return cls(n, m, float(np.sqrt(n)), float(np.sqrt(m)), **kw)
        if mode == "n_m":
            return cls(n, m, float(n), float(m), **kw)
        raise ValueError(f"unknown mode {mode!r}")


@dataclass
class BoundReport:
    """Terms of one bound evaluation.

    For Gibbs base learners the empirical error and the KL terms collapse
    into a single log-partition (free energy) term, reported as
    ``empirical_term``; ``kl_terms`` is then zero.
    """

    name: str
    n: int
    m: int
    lam: float
    beta: float
    delta: float
    empirical_term: float
    kl_terms: float
    complexity_C: float
    psi1: float
    psi2: float
    total: float
    mc_std_error: float

    CSV_FIELDS = ("name", "n", "m", "lam", "beta", "delta", "empirical_term", "kl_terms",
                  "complexity_C", "psi1", "psi2", "total", "mc_std_error")

    def csv_row(self) -> list:
        d = asdict(self)
        return [d[k] for k in self.CSV_FIELDS]


# ---------------------------------------------------------------------------
# complexity terms
# ---------------------------------------------------------------------------

def _delta_term(n: int, delta: float) -> float:
    return float(np.log(1.0 / delta) / np.sqrt(n))


def complexity_bounded(cfg: BoundConfig) -> float:
    """``(lambda/(8n) + beta/(8m)) (b-a)^2 + log(1/delta)/sqrt(n)``."""
    lm = cfg.loss_model
    if not isinstance(lm, BoundedLoss):
        raise TypeError("complexity_bounded needs a BoundedLoss")
    if lm.b < lm.a:
        raise InvalidRange(f"b={lm.b} < a={lm.a}")
    width = (lm.b - lm.a) ** 2
    return (cfg.lam / (8 * cfg.n) + cfg.beta / (8 * cfg.m)) * width + _delta_term(cfg.n, cfg.delta)


def bounded_cgf_terms(cfg: BoundConfig) -> tuple[float, float]:
    """Hoeffding bounds ``(psi1, psi2)`` for a loss in ``[a, b]``."""
    lm = cfg.loss_model
    width = (lm.b - lm.a) ** 2
    return cfg.beta * width / (8 * cfg.m), cfg.lam * width / (8 * cfg.n)


def subgamma_term(temp: float, size: int, s_sq: float, c: float) -> float:
    """``temp s^2 / (2 size (1 - c temp / size))`` with its validity check."""
    u = c * temp / size
    if u >= 1.0:
        raise OutOfValidityWindow(f"need temperature < size/c, got c*temp/size = {u:.4g}")
    return temp * s_sq / (2 * size * (1.0 - u))


def complexity_subgamma(cfg: BoundConfig) -> float:
    """``beta s1^2/(2m(1 - c1 beta/m)) + lambda s2^2/(2n(1 - c2 lambda/n)) + log(1/delta)/sqrt(n)``."""
    lm = cfg.loss_model
    if not isinstance(lm, SubGammaLoss):
        raise TypeError("complexity_subgamma needs a SubGammaLoss")
    return (subgamma_term(cfg.beta, cfg.m, lm.s1_sq, lm.c1)
            + subgamma_term(cfg.lam, cfg.n, lm.s2_sq, lm.c2) + _delta_term(cfg.n, cfg.delta))


def complexity(cfg: BoundConfig) -> float:
    if isinstance(cfg.loss_model, BoundedLoss):
        return complexity_bounded(cfg)
    return complexity_subgamma(cfg)


def complexity_from_cgf(psi1: float, psi2: float, n: int, delta: float) -> float:
    return psi1 + psi2 + _delta_term(n, delta)


# ---------------------------------------------------------------------------
# linear regression: closed forms
# ---------------------------------------------------------------------------

def blr_loss(w, X, y, sigma2: float) -> np.ndarray:
    """Per-point Gaussian NLL ``0.5 log(2 pi s2) + (y - w^T x)^2 / (2 s2)``."""
    r = np.asarray(y) - np.asarray(X) @ np.asarray(w).T
    return 0.5 * np.log(2 * np.pi * sigma2) + r**2 / (2 * sigma2)


def blr_log_z_quadratic(X, y, beta: float, sigma2: float, prior_var) -> tuple[float, np.ndarray, np.ndarray]:
    """``log Z`` of a linear task as a quadratic in the prior mean.

    Returns ``(c, h, H)`` with ``log Z(mu) = c + h^T mu - 0.5 mu^T H mu`` for
    the prior ``N(mu, diag(prior_var))`` and the tempered Gaussian NLL.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    m, d = X.shape
    if m == 0:
        return 0.0, np.zeros(d), np.zeros((d, d))
    s = np.broadcast_to(np.asarray(prior_var, dtype=float), (d,))
    gamma = beta / m
    a = gamma / (2 * sigma2)
    A = np.eye(m) + 2 * a * (X * s) @ X.T
    sol, logdet = cholesky_logdet_solve(A, np.column_stack([y, X]))
    Ainv_y, Ainv_X = sol[:, 0], sol[:, 1:]
    c = -gamma * 0.5 * m * np.log(2 * np.pi * sigma2) - 0.5 * logdet - a * y @ Ainv_y
    h = 2 * a * X.T @ Ainv_y
    H = 2 * a * X.T @ Ainv_X
    return float(c), h, 0.5 * (H + H.T)


def blr_log_z(prior_mean, prior_var, X, y, beta: float, sigma2: float) -> float:
    """Closed-form ``log E_{w ~ N(mu, diag(var))} exp(-(beta/m) sum_j l(w, x_j, y_j))``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if np.asarray(y).size == 0:
        return 0.0
    c, h, H = blr_log_z_quadratic(X, y, beta, sigma2, prior_var)
    mu = np.asarray(prior_mean, dtype=float)
    return float(c + h @ mu - 0.5 * mu @ H @ mu)


def blr_log_z_batch(mus: np.ndarray, X, y, beta: float, sigma2: float, prior_var) -> np.ndarray:
    """``log Z`` for many prior means ``(K, d)`` at once."""
    c, h, H = blr_log_z_quadratic(X, y, beta, sigma2, prior_var)
    return c + mus @ h - 0.5 * np.einsum("kd,de,ke->k", mus, H, mus)


@dataclass
class BlrHyperPosterior:
    """Exact PACOH over the prior mean in the linear-regression study (Gaussian)."""

    mean: np.ndarray
    cov: np.ndarray
    log_z2: float


def blr_hyper_posterior(tasks: Sequence[TaskDataset], lam: float, beta: float, sigma2: float,
                        prior_var: float, hyper_mean, hyper_var: float) -> BlrHyperPosterior:
    """Closed-form ``Q*(mu) ∝ N(mu; hyper_mean, hyper_var I) exp(rho sum_i log Z_i(mu))``.

    Also returns the exact ``log Z^II = log E_P exp(rho sum_i log Z_i)``
    with ``rho = lambda / (n beta + lambda)``.
    """
    n = len(tasks)
    d = tasks[0].dim
    m0 = np.broadcast_to(np.asarray(hyper_mean, dtype=float), (d,))
    rho = lam / (n * beta + lam)
    c_sum, h_sum, H_sum = 0.0, np.zeros(d), np.zeros((d, d))
    for t in tasks:
        c, h, H = blr_log_z_quadratic(t.inputs, t.targets, beta, sigma2, prior_var)
        c_sum += c
        h_sum += h
        H_sum += H
    prec = np.eye(d) / hyper_var + rho * H_sum
    lin = m0 / hyper_var + rho * h_sum
    L, _ = cholesky_jittered(prec)
    cov = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(d)))
    mean = cov @ lin
    logdet_prec = 2 * np.sum(np.log(np.diag(L)))
    log_z2 = (rho * c_sum + 0.5 * lin @ mean - 0.5 * m0 @ m0 / hyper_var
              - 0.5 * d * np.log(hyper_var) - 0.5 * logdet_prec)
    return BlrHyperPosterior(mean, 0.5 * (cov + cov.T), float(log_z2))


def blr_gibbs_posterior(mu, X, y, beta: float, sigma2: float, prior_var: float):
    """Gibbs posterior ``N(A mu + b, cov)`` of a linear task; returns ``(A, b, cov)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    m, d = X.shape
    g = (beta / m) / sigma2 if m else 0.0
    prec = np.eye(d) / prior_var + g * X.T @ X
    cov = np.linalg.inv(prec)
    A = cov / prior_var
    b = g * cov @ X.T @ np.asarray(y, dtype=float) if m else np.zeros(d)
    return A, b, cov


def blr_expected_loss(mean_w, second_extra: float, w_star, sigma2, sigma_x2, sigma_eps2) -> float:
    """``E L(w, D)`` for ``w`` with given mean and ``E||w - mean||^2 = second_extra``."""
    diff = np.asarray(mean_w) - np.asarray(w_star)
    return float(0.5 * np.log(2 * np.pi * sigma2)
                 + (sigma_x2 * (diff @ diff + second_extra) + sigma_eps2) / (2 * sigma2))


def blr_transfer_error(test_tasks: Sequence[TaskDataset], mu_mean, mu_cov, beta: float, sigma2: float,
                       prior_var: float, sigma_x2: float, sigma_eps2: float) -> tuple[float, float]:
    """Exact expected Gibbs error per test task for prior means ``mu ~ N(mu_mean, mu_cov)``.

    Returns ``(mean over tasks, standard error over tasks)``. The test tasks
    must carry ``meta["w_star"]``.
    """
    errs = []
    for t in test_tasks:
        A, b, cov = blr_gibbs_posterior(mu_mean, t.inputs, t.targets, beta, sigma2, prior_var)
        mean_w = A @ mu_mean + b
        extra = np.trace(cov) + np.trace(A @ mu_cov @ A.T)
        errs.append(blr_expected_loss(mean_w, extra, t.meta["w_star"], sigma2, sigma_x2, sigma_eps2))
    errs = np.array(errs)
    return float(errs.mean()), float(errs.std(ddof=1) / np.sqrt(len(errs))) if len(errs) > 1 else 0.0


# ---------------------------------------------------------------------------
# linear regression: CGF constants
# ---------------------------------------------------------------------------

@dataclass
class BlrCgfConstants:
    theta: float
    c: float
    s_sq: float
    psi1_term: float


def blr_cgf_raw(w_star, sigma2, sigma_x2, sigma_P2, sigma_hp2, sigma_eps2, d, gamma):
    """``(theta_i, c_i, s_i^2)`` of the data-level sub-gamma CGF bound, without checks."""
    w_star = np.asarray(w_star, dtype=float)
    theta = sigma_x2 * float(w_star @ w_star) + sigma_eps2
    spread = d * sigma_x2 * (sigma_P2 + sigma_hp2)
    c = spread / sigma2 + gamma * spread * theta / sigma2**2 - theta / sigma2
    s_sq = (theta / sigma2) * (1.0 / gamma - c) + c / gamma
    return theta, c, s_sq


def blr_cgf_constants(w_star, sigma2, sigma_x2, sigma_P2, sigma_hp2, sigma_eps2, d,
                      gamma) -> BlrCgfConstants:
    """Data-level CGF constants of one task and its ``psi1`` contribution.

    With ``gamma = beta / m`` the contribution is ``s^2 / (2 (1/gamma - c))``,
    which for ``beta = sqrt(m)`` reads ``s^2 / (2 (sqrt(m) - c))``.

    Raises:
        OutOfValidityWindow: if ``gamma * c >= 1``.
    """
    if gamma <= 0:
        raise OutOfValidityWindow("gamma must be positive")
    theta, c, s_sq = blr_cgf_raw(w_star, sigma2, sigma_x2, sigma_P2, sigma_hp2, sigma_eps2, d, gamma)
    if c > 0 and gamma * c >= 1:
        raise OutOfValidityWindow(f"gamma*c = {gamma * c:.4g} >= 1 (c = {c:.4g})")
    return BlrCgfConstants(theta, c, s_sq, s_sq / (2 * (1.0 / gamma - c)))


def blr_cgf2_raw(mu_T, sigma_T2, sigma_hp2, sigma_x2, sigma2, d):
    mu_T = np.broadcast_to(np.asarray(mu_T, dtype=float), (max(d, 0),))
    c2 = (sigma_x2 / sigma2) * (sigma_hp2 + sigma_T2)
    s2_sq = (sigma_x2 / sigma2) * c2 * float(mu_T @ mu_T) + d * c2**2
    return c2, s2_sq


def blr_cgf2_constants(mu_T, sigma_T2, sigma_hp2, sigma_x2, sigma2, d, kappa: float):
    """Task-level constants ``(c_II, s_II^2, psi2 term)`` with ``kappa = lambda / n``.

    The term is ``s_II^2 / (2 (1/kappa - c_II))``, i.e. ``s_II^2 / (2 (sqrt(n) - c_II))``
    for ``lambda = sqrt(n)``.
    """
    c2, s2_sq = blr_cgf2_raw(mu_T, sigma_T2, sigma_hp2, sigma_x2, sigma2, d)
    if kappa <= 0:
        raise OutOfValidityWindow("kappa must be positive")
    if c2 > 0 and kappa * c2 >= 1:
        raise OutOfValidityWindow(f"kappa*c_II = {kappa * c2:.4g} >= 1")
    return c2, s2_sq, s2_sq / (2 * (1.0 / kappa - c2))


def blr_complexity(tasks: Sequence[TaskDataset], cfg: BoundConfig, sigma2: float, sigma_x2: float,
                   sigma_P2: float, sigma_hp2: float, sigma_eps2: float, mu_T,
                   sigma_T2: float) -> tuple[float, float, float]:
    """``(C, psi1, psi2)`` for the linear-regression study from true task weights."""
    d = tasks[0].dim
    gamma = cfg.beta / cfg.m
    psi1 = float(np.mean([blr_cgf_constants(t.meta["w_star"], sigma2, sigma_x2, sigma_P2, sigma_hp2,
                                            sigma_eps2, d, gamma).psi1_term for t in tasks]))
    psi2 = blr_cgf2_constants(mu_T, sigma_T2, sigma_hp2, sigma_x2, sigma2, d, cfg.lam / cfg.n)[2]
    return complexity_from_cgf(psi1, psi2, cfg.n, cfg.delta), psi1, psi2


# ---------------------------------------------------------------------------
# hyper-prior Monte Carlo and the bounds
# ---------------------------------------------------------------------------

@dataclass
class HyperPrior:
    """Isotropic Gaussian over prior parameters; ``std = 0`` is a Dirac."""

    mean: np.ndarray
    std: float

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if self.std < 0:
            raise ValueError("std must be non-negative")

    def sample(self, rng: RngStream, k: int) -> np.ndarray:
        return self.mean + self.std * rng.normal(size=(k, self.mean.shape[0]))


LogZFn = Callable[[TaskDataset, np.ndarray], np.ndarray]


def log_z_matrix(tasks: Sequence[TaskDataset], hyper_prior: HyperPrior, logz_fn: LogZFn,
                 mc_priors: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """``(K, n)`` matrix of ``log Z(S_i, P_k)`` for ``K = mc_priors`` hyper-prior draws.

    ``logz_fn(task, params)`` maps ``(K, p)`` prior parameters to ``(K,)`` values.
    """
    params = hyper_prior.sample(rng, mc_priors)
    M = np.column_stack([logz_fn(t, params) for t in tasks]) if tasks else np.zeros((mc_priors, 0))
    return M, params


def _pacoh_from_matrix(M: np.ndarray, lam: float, beta: float):
    K, n = M.shape
    rho = lam / (n * beta + lam)
    s = rho * M.sum(axis=1)
    log_z2 = logsumexp(s) - np.log(K)
    w = np.exp(s - s.max())
    se_log = float(w.std(ddof=1) / (w.mean() * np.sqrt(K))) if K > 1 else 0.0
    coef = 1.0 / lam + 1.0 / (n * beta)
    return -coef * log_z2, coef * se_log


def _per_task_from_matrix(M: np.ndarray, beta: float):
    K, n = M.shape
    tot = M.sum(axis=1)
    val = -tot.mean() / (n * beta)
    se = float(tot.std(ddof=1) / (np.sqrt(K) * n * beta)) if K > 1 else 0.0
    return val, se


def _report(name, cfg_like, term, C, psi, se) -> BoundReport:
    n, m, lam, beta, delta = cfg_like
    return BoundReport(name, n, m, lam, beta, delta, float(term), 0.0, float(C),
                       float(psi[0]), float(psi[1]), float(term + C), float(se))


def pacoh_bound(tasks: Sequence[TaskDataset] | None, hyper_prior: HyperPrior | None, cfg: BoundConfig,
                C: float, logz_fn: LogZFn | None = None, rng: RngStream | None = None,
                logz: np.ndarray | None = None, psi=(np.nan, np.nan)) -> BoundReport:
    """PACOH bound ``-(1/lambda + 1/(n beta)) log Zhat^II + C``.

    ``log Zhat^II`` is the log-mean-exp over hyper-prior draws of
    ``rho sum_i log Z_i``; it is biased low, making the bound conservative.
    Pass a precomputed ``logz`` matrix to share samples with
    :func:`per_task_bound`.
    """
    if logz is None:
        logz, _ = log_z_matrix(tasks, hyper_prior, logz_fn, cfg.mc_priors,
                               rng if rng is not None else RngStream(cfg.mc_seed))
    term, se = _pacoh_from_matrix(logz, cfg.lam, cfg.beta)
    return _report("pacoh", (cfg.n, cfg.m, cfg.lam, cfg.beta, cfg.delta), term, C, psi, se)


def per_task_bound(tasks: Sequence[TaskDataset] | None, hyper_prior: HyperPrior | None, cfg: BoundConfig,
                   C: float, logz_fn: LogZFn | None = None, rng: RngStream | None = None,
                   logz: np.ndarray | None = None, psi=(np.nan, np.nan)) -> BoundReport:
    """Per-task learning bound ``-(1/(n beta)) sum_i E_P[log Z_beta(S_i, P)] + C``."""
    if logz is None:
        logz, _ = log_z_matrix(tasks, hyper_prior, logz_fn, cfg.mc_priors,
                               rng if rng is not None else RngStream(cfg.mc_seed))
    term, se = _per_task_from_matrix(logz, cfg.beta)
    return _report("per_task", (cfg.n, cfg.m, cfg.lam, cfg.beta, cfg.delta), term, C, psi, se)


def delta_improvement(tasks: Sequence[TaskDataset] | None, hyper_prior: HyperPrior | None,
                      lam: float, beta: float, mc_priors: int = 2000, rng: RngStream | None = None,
                      logz_fn: LogZFn | None = None,
                      logz: np.ndarray | None = None) -> tuple[float, float]:
    """Improvement ``Delta`` of the PACOH bound over the per-task bound.

    ``Delta = (1/lambda + 1/(n beta)) * [log E exp(rho (s - E s))]`` with
    ``s = sum_i log Z(S_i, P)`` and ``rho = lambda/(n beta + lambda)``: the
    cumulant-generating function of ``s`` under the hyper-prior, evaluated
    on the Monte-Carlo sample.

    Returns:
        ``(Delta, standard error)``.
    """
    if logz is None:
        logz, _ = log_z_matrix(tasks, hyper_prior, logz_fn, mc_priors,
                               rng if rng is not None else RngStream(0))
    K, n = logz.shape
    rho = lam / (n * beta + lam)
    s = logz.sum(axis=1)
    # a degenerate hyper-prior gives identical rows; s.mean() can still differ
    # from them by an ulp, so the exact zero CGF is returned directly
    if np.ptp(s) == 0:
        cgf = 0.0
    else:
        cgf = logsumexp(rho * (s - s.mean())) - np.log(K)
    coef = 1.0 / lam + 1.0 / (n * beta)
    _, se_p = _pacoh_from_matrix(logz, lam, beta)
    _, se_t = _per_task_from_matrix(logz, beta)
    return float(coef * cgf), float(np.hypot(se_p, se_t))


# ---------------------------------------------------------------------------
# linear classification with the 0-1 loss
# ---------------------------------------------------------------------------

def zero_one_errors(W: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Number of mistakes of ``h_w(x) = 1[w^T x > 0]`` for each row of ``W``."""
    pred = (np.atleast_2d(W) @ X.T) > 0
    return np.sum(pred != (y[None, :] > 0.5), axis=1)


def angle_density(mus: np.ndarray, sigma: float, angles: np.ndarray) -> np.ndarray:
    """Density of the direction of ``w ~ N(mu, sigma^2 I_2)`` on a grid of angles.

    ``p(t) = exp(-|mu|^2 / (2 s^2)) / (2 pi) * (1 + a sqrt(2 pi) exp(a^2/2) Phi(a))``
    with ``a = mu . u(t) / s``. Returns ``(K, G)``.
    """
    u = np.stack([np.cos(angles), np.sin(angles)])
    a = (mus @ u) / sigma
    b2 = np.sum(mus**2, axis=1)[:, None] / sigma**2
    # exp(-b2/2) * a * sqrt(2pi) * exp(a^2/2) * Phi(a), evaluated in log space for stability
    tail = np.sqrt(2 * np.pi) * a * np.exp(0.5 * a * a - 0.5 * b2 + special.log_ndtr(a))
    return (np.exp(-0.5 * b2) + tail) / (2 * np.pi)


class ZeroOneLogZ:
    """``log Z_beta(S, N(mu, sigma_P^2 I))`` of the 0-1 loss for 2-D linear classifiers.

    The 0-1 loss depends on ``w`` only through its direction, so
    ``Z = int p(t) exp(-(beta/m) errors(t)) dt`` is an integral over the
    angle. It is evaluated with a midpoint rule on ``grid`` angles using the
    closed-form angular density.
    """

    def __init__(self, sigma_P: float, beta: float, grid: int = 4096, chunk: int = 512):
        self.sigma_P = sigma_P
        self.beta = beta
        self.angles = (np.arange(grid) + 0.5) * (2 * np.pi / grid)
        self.dt = 2 * np.pi / grid
        self.chunk = chunk

    def error_table(self, tasks: Sequence[TaskDataset]) -> np.ndarray:
        U = np.stack([np.cos(self.angles), np.sin(self.angles)], axis=1)
        return np.stack([zero_one_errors(U, t.inputs, t.targets) for t in tasks], axis=1)

    def matrix(self, mus: np.ndarray, tasks: Sequence[TaskDataset]) -> np.ndarray:
        """``(K, n)`` matrix of ``log Z(S_i, P_k)``."""
        errs = self.error_table(tasks)
        gammas = np.array([self.beta / t.m for t in tasks])
        E = np.exp(-gammas[None, :] * errs)
        out = np.empty((mus.shape[0], len(tasks)))
        for s in range(0, mus.shape[0], self.chunk):
            P = angle_density(mus[s:s + self.chunk], self.sigma_P, self.angles)
            out[s:s + self.chunk] = np.log(P @ E * self.dt)
        return out

    def __call__(self, task: TaskDataset, mus: np.ndarray) -> np.ndarray:
        return self.matrix(mus, [task])[:, 0]


def zero_one_log_z_mc(task: TaskDataset, mu: np.ndarray, sigma_P: float, beta: float,
                      n_draws: int, rng: RngStream) -> float:
    """Log-sum-exp importance-sampling estimate of the same quantity from prior draws."""
    W = mu + sigma_P * rng.normal(size=(n_draws, mu.shape[0]))
    errs = zero_one_errors(W, task.inputs, task.targets)
    return float(logsumexp(-(beta / task.m) * errs) - np.log(n_draws))


def _ess(logw: np.ndarray) -> float:
    w = np.exp(logw - logw.max())
    return float(w.sum() ** 2 / np.sum(w * w))


def _snis_weights(logw: np.ndarray, min_ess: float) -> np.ndarray:
    ess = _ess(logw)
    if ess < min_ess:
        raise EffectiveSampleSizeTooLow(f"effective sample size {ess:.1f} < {min_ess}")
    return special.softmax(logw)


def gibbs_error_snis(task: TaskDataset, w_star: np.ndarray, mu: np.ndarray, sigma_P: float,
                     beta: float, rng: RngStream, n_draws: int = 2000, n_test: int = 2000,
                     posterior_loss: str = "logistic", min_ess: float = 50.0) -> float:
    """Expected 0-1 error on the task distribution of the Gibbs posterior for prior ``N(mu, sigma_P^2 I)``.

    The posterior is represented by self-normalised importance sampling from
    the prior, with weights ``exp(-beta Lhat(w))`` where ``Lhat`` is the
    logistic loss (``posterior_loss="logistic"``) or the 0-1 loss
    (``"zero_one"``). The true error of each draw is averaged over
    ``n_test`` fresh inputs using exact label probabilities.
    """
    d = mu.shape[0]
    W = mu + sigma_P * rng.normal(size=(n_draws, d))
    X, y = task.inputs, task.targets
    if posterior_loss == "logistic":
        z = W @ X.T
        sgn = 2 * y[None, :] - 1
        lhat = np.mean(np.logaddexp(0.0, -sgn * z), axis=1)
    elif posterior_loss == "zero_one":
        lhat = zero_one_errors(W, X, y) / task.m
    else:
        raise ValueError(f"unknown posterior loss {posterior_loss!r}")
    weights = _snis_weights(-beta * lhat, min_ess)
    Xt = rng.uniform(-1.0, 1.0, size=(n_test, d))
    p1 = sigmoid(Xt @ w_star)
    pred = (W @ Xt.T) > 0
    err = np.where(pred, 1.0 - p1[None, :], p1[None, :]).mean(axis=1)
    return float(weights @ err)


def misclassification_transfer_error(env_sampler: Callable[[RngStream], TaskDataset],
                                     prior_means: np.ndarray, prior_log_weights: np.ndarray | None,
                                     sigma_P: float, beta: float, rng: RngStream, n_tasks: int = 200,
                                     posterior_loss: str = "logistic", n_draws: int = 2000,
                                     min_ess: float = 50.0) -> tuple[float, float]:
    """Monte-Carlo transfer error of Gibbs learners with priors from a (hyper-)distribution.

    Args:
        env_sampler: draws a fresh task (with ``meta["w_star"]``) from a stream.
        prior_means: candidate prior means ``(K, d)``; with
            ``prior_log_weights`` they form a self-normalised importance
            sample of the hyper-posterior (``None`` means equal weights,
            e.g. draws from the hyper-prior).
        sigma_P: prior std.
        beta: Gibbs temperature.
        rng: random stream.
        n_tasks: number of test tasks.
        posterior_loss: loss in the Gibbs weights.
        n_draws: prior draws per posterior.
        min_ess: minimum effective sample size of any importance sample.

    Returns:
        ``(mean error, standard error over tasks)``.
    """
    K = prior_means.shape[0]
    if prior_log_weights is None:
        probs = np.full(K, 1.0 / K)
    else:
        probs = _snis_weights(np.asarray(prior_log_weights, dtype=float), min_ess)
    errs = np.empty(n_tasks)
    for j in range(n_tasks):
        r = rng.fork(j)
        task = env_sampler(r.fork(0))
        k = int(r.fork(1).choice(K, p=probs))
        errs[j] = gibbs_error_snis(task, task.meta["w_star"], prior_means[k], sigma_P, beta, r.fork(2),
                                   n_draws=n_draws, posterior_loss=posterior_loss, min_ess=min_ess)
    return float(errs.mean()), float(errs.std(ddof=1) / np.sqrt(n_tasks)) if n_tasks > 1 else 0.0
