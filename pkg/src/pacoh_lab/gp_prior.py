"""Gaussian-process base learner with a neural mean function and a neural
feature-map kernel ``k(x, x') = 0.5 * exp(-||f(x) - f(x')||^2)``.

The prior parameters ``phi`` are the concatenation of the mean-net and the
feature-net parameter vectors. The observation noise variance is a fixed
hyperparameter and is not part of ``phi``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy import stats

from .mlp import MlpArchitecture, backward_from_cache, forward_with_cache, mlp_forward
from .numerics import LOG_2PI, DimensionMismatch, cholesky_jittered

KERNEL_SCALE = 0.5


@dataclass(frozen=True)
class GpModel:
    """Architecture of the meta-learnable GP prior family.

    Attributes:
        input_dim: dimension of the inputs.
        mean_hidden: hidden widths of the mean network.
        feature_hidden: hidden widths of the feature network.
        feature_dim: output dimension of the feature map.
        noise_var: observation noise variance sigma^2 (not meta-learned).
    """

    input_dim: int = 1
    mean_hidden: tuple = (32, 32, 32, 32)
    feature_hidden: tuple = (32, 32, 32, 32)
    feature_dim: int = 2
    noise_var: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "mean_hidden", tuple(self.mean_hidden))
        object.__setattr__(self, "feature_hidden", tuple(self.feature_hidden))
        if self.noise_var <= 0:
            raise ValueError("noise_var must be positive")

    @property
    def mean_arch(self) -> MlpArchitecture:
        return MlpArchitecture(self.input_dim, self.mean_hidden, 1)

    @property
    def feature_arch(self) -> MlpArchitecture:
        return MlpArchitecture(self.input_dim, self.feature_hidden, self.feature_dim)

    @property
    def dim(self) -> int:
        return self.mean_arch.n_params + self.feature_arch.n_params

    def prior(self, phi: np.ndarray) -> "GpPriorParams":
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.dim,):
            raise DimensionMismatch(f"phi has shape {phi.shape}, expected ({self.dim},)")
        k = self.mean_arch.n_params
        return GpPriorParams(self.mean_arch, self.feature_arch, phi[:k], phi[k:], self.noise_var)

    def to_dict(self) -> dict:
        return {"kind": "gp", "input_dim": self.input_dim, "mean_hidden": list(self.mean_hidden),
                "feature_hidden": list(self.feature_hidden), "feature_dim": self.feature_dim,
                "noise_var": self.noise_var}

    @classmethod
    def from_dict(cls, d: dict) -> "GpModel":
        return cls(int(d["input_dim"]), tuple(d["mean_hidden"]), tuple(d["feature_hidden"]),
                   int(d["feature_dim"]), float(d["noise_var"]))

    # interface used by the meta-learner -----------------------------------
    def log_z_and_grad(self, phi, task, rng=None, beta=None):
        """Exact log marginal likelihood (``beta = m``) and its gradient."""
        return gp_mll_grad(self.prior(phi), task.inputs, task.targets)


@dataclass
class GpPriorParams:
    """One member of the GP prior family."""

    mean_arch: MlpArchitecture
    feature_arch: MlpArchitecture
    mean_net: np.ndarray
    feature_net: np.ndarray
    noise_variance: float = 0.05

    def __post_init__(self):
        if not self.noise_variance > 0:
            raise ValueError("noise variance must be positive")

    @property
    def phi(self) -> np.ndarray:
        return np.concatenate([self.mean_net, self.feature_net])


@dataclass
class GpPredictive:
    """Gaussian predictive distribution at a batch of query points."""

    mean: np.ndarray
    variance: np.ndarray

    def cdf(self, y) -> np.ndarray:
        return stats.norm.cdf(y, loc=self.mean, scale=np.sqrt(self.variance))

    def logpdf(self, y) -> np.ndarray:
        return stats.norm.logpdf(y, loc=self.mean, scale=np.sqrt(self.variance))


def _features(prior: GpPriorParams, X: np.ndarray) -> np.ndarray:
    return mlp_forward(prior.feature_arch, prior.feature_net, X)


def _kernel_from_features(F1: np.ndarray, F2: np.ndarray) -> np.ndarray:
    sq = (np.sum(F1**2, 1)[:, None] + np.sum(F2**2, 1)[None, :] - 2.0 * F1 @ F2.T)
    return KERNEL_SCALE * np.exp(-np.maximum(sq, 0.0))


def gp_kernel(prior: GpPriorParams, x, x2) -> float:
    """Kernel value ``0.5 * exp(-||f(x) - f(x2)||^2)`` for two single inputs."""
    f1 = mlp_forward(prior.feature_arch, prior.feature_net, np.atleast_1d(x))
    f2 = mlp_forward(prior.feature_arch, prior.feature_net, np.atleast_1d(x2))
    d = f1 - f2
    return float(KERNEL_SCALE * np.exp(-np.dot(d, d)))


def kernel_matrix(prior: GpPriorParams, X1: np.ndarray, X2: np.ndarray | None = None) -> np.ndarray:
    """Kernel matrix between the rows of ``X1`` and ``X2`` (default ``X1``)."""
    F1 = _features(prior, np.atleast_2d(X1))
    if X2 is None:
        K = _kernel_from_features(F1, F1)
        np.fill_diagonal(K, KERNEL_SCALE)
        return K
    return _kernel_from_features(F1, _features(prior, np.atleast_2d(X2)))


def _check_data(prior, X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    if X.shape[1] != prior.mean_arch.input_dim:
        raise DimensionMismatch("input dimension does not match the prior")
    return X, y


def gp_mll(prior: GpPriorParams, X, y) -> float:
    """Log marginal likelihood ``log N(y | m(X), K + sigma^2 I)``."""
    X, y = _check_data(prior, X, y)
    m = X.shape[0]
    r = y - mlp_forward(prior.mean_arch, prior.mean_net, X)[:, 0]
    Kt = kernel_matrix(prior, X) + prior.noise_variance * np.eye(m)
    L, _ = cholesky_jittered(Kt)
    a = sla.solve_triangular(L, r, lower=True)
    return float(-0.5 * a @ a - np.sum(np.log(np.diag(L))) - 0.5 * m * LOG_2PI)


def gp_mll_grad(prior: GpPriorParams, X, y) -> tuple[float, np.ndarray]:
    """Log marginal likelihood and its gradient with respect to ``phi``.

    With ``r = y - m(X)``, ``alpha = Kt^{-1} r`` and ``G = 0.5 (alpha alpha^T -
    Kt^{-1})`` the gradient with respect to the mean outputs is ``alpha`` and
    with respect to feature ``f_i`` it is ``-4 sum_j G_ij K_ij (f_i - f_j)``.
    Both are pushed through the respective network by reverse mode.
    """
    X, y = _check_data(prior, X, y)
    m = X.shape[0]
    mean_out, mean_cache = forward_with_cache(prior.mean_arch, prior.mean_net[None], X)
    F_out, feat_cache = forward_with_cache(prior.feature_arch, prior.feature_net[None], X)
    F = F_out[0]
    r = y - mean_out[0, :, 0]
    K = _kernel_from_features(F, F)
    np.fill_diagonal(K, KERNEL_SCALE)
    Kt = K + prior.noise_variance * np.eye(m)
    L, _ = cholesky_jittered(Kt)
    Kinv = sla.cho_solve((L, True), np.eye(m))
    alpha = Kinv @ r
    value = float(-0.5 * r @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * m * LOG_2PI)

    G = 0.5 * (np.outer(alpha, alpha) - Kinv)
    GK = G * K
    dF = -4.0 * (GK.sum(axis=1)[:, None] * F - GK @ F)

    g_mean, _ = backward_from_cache(prior.mean_arch, mean_cache, alpha[None, :, None])
    g_feat, _ = backward_from_cache(prior.feature_arch, feat_cache, dF[None])
    return value, np.concatenate([g_mean[0], g_feat[0]])


def gp_posterior_predict(prior: GpPriorParams, X, y, Xstar) -> GpPredictive:
    """Posterior predictive at ``Xstar`` given context ``(X, y)``, which may be empty.

    The returned variance includes the observation noise.
    """
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    mu_star = mlp_forward(prior.mean_arch, prior.mean_net, Xstar)[:, 0]
    prior_var = np.full(Xstar.shape[0], KERNEL_SCALE)
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        return GpPredictive(mu_star, prior_var + prior.noise_variance)
    X, y = _check_data(prior, X, y)
    m = X.shape[0]
    F = _features(prior, X)
    Fs = _features(prior, Xstar)
    K = _kernel_from_features(F, F)
    np.fill_diagonal(K, KERNEL_SCALE)
    L, _ = cholesky_jittered(K + prior.noise_variance * np.eye(m))
    r = y - mlp_forward(prior.mean_arch, prior.mean_net, X)[:, 0]
    alpha = sla.cho_solve((L, True), r)
    Ks = _kernel_from_features(Fs, F)
    V = sla.solve_triangular(L, Ks.T, lower=True)
    mean = mu_star + Ks @ alpha
    latent = np.maximum(prior_var - np.sum(V * V, axis=0), 0.0)
    return GpPredictive(mean, latent + prior.noise_variance)


def gp_multi_task_mll_grad(prior: GpPriorParams, tasks, coeffs) -> tuple[np.ndarray, np.ndarray]:
    """Per-task log marginal likelihoods and the gradient of ``sum_i c_i mll_i``.

    The networks are evaluated once on the concatenated inputs of all tasks;
    the small per-task kernel algebra runs in a loop. Gives the same result
    as summing :func:`gp_mll_grad` over tasks.
    """
    sizes = [t.m for t in tasks]
    X = np.concatenate([t.inputs for t in tasks])
    mean_out, mean_cache = forward_with_cache(prior.mean_arch, prior.mean_net[None], X)
    F_out, feat_cache = forward_with_cache(prior.feature_arch, prior.feature_net[None], X)
    F_all = F_out[0]
    mu_all = mean_out[0, :, 0]
    d_mean = np.empty(X.shape[0])
    d_feat = np.empty_like(F_all)
    values = np.empty(len(tasks))
    pos = 0
    for i, (task, c) in enumerate(zip(tasks, coeffs)):
        m = sizes[i]
        sl = slice(pos, pos + m)
        pos += m
        F = F_all[sl]
        r = task.targets - mu_all[sl]
        K = _kernel_from_features(F, F)
        np.fill_diagonal(K, KERNEL_SCALE)
        L, _ = cholesky_jittered(K + prior.noise_variance * np.eye(m))
        Kinv = sla.cho_solve((L, True), np.eye(m))
        alpha = Kinv @ r
        values[i] = -0.5 * r @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * m * LOG_2PI
        GK = (0.5 * (np.outer(alpha, alpha) - Kinv)) * K
        d_mean[sl] = c * alpha
        d_feat[sl] = -4.0 * c * (GK.sum(axis=1)[:, None] * F - GK @ F)
    g_mean, _ = backward_from_cache(prior.mean_arch, mean_cache, d_mean[None, :, None])
    g_feat, _ = backward_from_cache(prior.feature_arch, feat_cache, d_feat[None])
    return values, np.concatenate([g_mean[0], g_feat[0]])
