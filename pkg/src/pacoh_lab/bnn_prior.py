"""Bayesian-neural-network base learner.

A hypothesis is ``h = (theta, log_sigma)``: network weights plus (for
Gaussian likelihoods with a learnable noise) the log observation std. A prior
over hypotheses is a diagonal Gaussian whose parameters
``phi = (mu_P, log sigma_P)`` are what the meta-learner optimises.

The generalised marginal log-likelihood ``log E_P exp(-beta * Lhat(h, S))`` is
estimated with the log-sum-exp estimator over ``L`` reparametrised prior
samples ``h_l = mu_P + sigma_P * eps_l``. Its gradient is the softmax-weighted
average of the per-sample gradients pushed back through the
reparametrisation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .mlp import MlpArchitecture, backward_from_cache, fan_in_std, forward_with_cache
from .numerics import LOG_2PI, DiagonalGaussian, DimensionMismatch, RngStream

LOSS_CAP = 1e6


@dataclass(frozen=True)
class BnnModel:
    """Network architecture, likelihood and hyper-prior centre of a BNN prior family.

    Attributes:
        input_dim, hidden, output_dim: network architecture.
        likelihood: ``"gaussian"`` (regression) or ``"categorical"``.
        learn_noise: whether ``log sigma`` is part of the hypothesis; if
            false, ``fixed_noise_std`` is used.
        noise_prior_mean: hyper-prior centre of the prior mean of ``log sigma``.
        noise_prior_log_std: hyper-prior centre of the prior log-std of ``log sigma``.
        weight_prior_scale: vanilla prior std of the weights in units of
            ``1/sqrt(fan_in)``.
    """

    input_dim: int = 1
    hidden: tuple = (32, 32, 32, 32)
    output_dim: int = 1
    likelihood: str = "gaussian"
    learn_noise: bool = True
    fixed_noise_std: float = 0.1
    noise_prior_mean: float = float(np.log(0.1))
    noise_prior_log_std: float = float(np.log(0.5))
    weight_prior_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.likelihood not in ("gaussian", "categorical"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.likelihood == "categorical" and self.output_dim < 2:
            raise ValueError("categorical likelihood needs output_dim >= 2")

    @property
    def arch(self) -> MlpArchitecture:
        return MlpArchitecture(self.input_dim, self.hidden, self.output_dim)

    @property
    def has_noise_coord(self) -> bool:
        return self.likelihood == "gaussian" and self.learn_noise

    @property
    def n_theta(self) -> int:
        return self.arch.n_params + (1 if self.has_noise_coord else 0)

    @property
    def dim(self) -> int:
        """Dimension of ``phi = (mu_P, log sigma_P)``."""
        return 2 * self.n_theta

    def prior(self, phi) -> DiagonalGaussian:
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.dim,):
            raise DimensionMismatch(f"phi has shape {phi.shape}, expected ({self.dim},)")
        return DiagonalGaussian(phi[: self.n_theta], phi[self.n_theta:])

    def hyper_prior_mean(self) -> np.ndarray:
        """Centre of the hyper-prior; also the "vanilla" prior used without meta-learning."""
        mu = np.zeros(self.n_theta)
        log_s = np.empty(self.n_theta)
        log_s[: self.arch.n_params] = np.log(self.weight_prior_scale * fan_in_std(self.arch))
        if self.has_noise_coord:
            mu[-1] = self.noise_prior_mean
            log_s[-1] = self.noise_prior_log_std
        return np.concatenate([mu, log_s])

    def to_dict(self) -> dict:
        return {"kind": "bnn", "input_dim": self.input_dim, "hidden": list(self.hidden),
                "output_dim": self.output_dim, "likelihood": self.likelihood,
                "learn_noise": self.learn_noise, "fixed_noise_std": self.fixed_noise_std,
                "noise_prior_mean": self.noise_prior_mean,
                "noise_prior_log_std": self.noise_prior_log_std,
                "weight_prior_scale": self.weight_prior_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "BnnModel":
        d = dict(d)
        d.pop("kind", None)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    # interface used by the meta-learner -----------------------------------
    def log_z_and_grad(self, phi, task, rng: RngStream, beta: float, n_samples: int = 5):
        eps = rng.normal(size=(n_samples, self.n_theta))
        est, grad = mll_lse_with_eps(self, phi, [task], np.array([beta]), eps, np.ones(1))
        return est[0], grad


@dataclass
class MllEstimate:
    """Result of the log-sum-exp marginal likelihood estimator for one task."""

    value: float
    per_sample_losses: np.ndarray
    softmax_weights: np.ndarray


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _split_theta(model: BnnModel, theta: np.ndarray):
    P = model.arch.n_params
    w = theta[..., :P]
    if model.has_noise_coord:
        log_sigma = theta[..., P]
    else:
        log_sigma = np.full(theta.shape[:-1], np.log(model.fixed_noise_std))
    return w, log_sigma


def pointwise_nll(model: BnnModel, out: np.ndarray, log_sigma: np.ndarray, y: np.ndarray):
    """Per-point NLL and its derivatives.

    Args:
        out: network outputs ``(L, N, C)``.
        log_sigma: ``(L,)`` log noise std (ignored for categorical).
        y: ``(N,)`` targets (class indices for categorical).

    Returns:
        ``(loss (L, N), d_out (L, N, C), d_log_sigma (L, N) or None)``.
    """
    if model.likelihood == "gaussian":
        f = out[..., 0]
        inv_var = np.exp(-2.0 * log_sigma)[:, None]
        r = y[None, :] - f
        r2 = r * r * inv_var
        loss = 0.5 * LOG_2PI + log_sigma[:, None] + 0.5 * r2
        d_out = (-r * inv_var)[..., None]
        d_ls = 1.0 - r2
        return loss, d_out, d_ls
    labels = y.astype(int)
    lse = special.logsumexp(out, axis=-1)
    picked = np.take_along_axis(out, labels[None, :, None], axis=-1)[..., 0]
    loss = lse - picked
    d_out = special.softmax(out, axis=-1)
    d_out[..., np.arange(labels.shape[0]), labels] -= 1.0
    return loss, d_out, None


def nll_loss(model: BnnModel, theta: np.ndarray, x, y) -> float:
    """NLL of a single hypothesis on a single example."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.n_theta,):
        raise DimensionMismatch("hypothesis has the wrong length")
    w, ls = _split_theta(model, theta[None])
    out, _ = forward_with_cache(model.arch, w, np.atleast_2d(np.asarray(x, dtype=float)))
    loss, _, _ = pointwise_nll(model, out, np.atleast_1d(ls), np.atleast_1d(np.asarray(y, dtype=float)))
    val = float(loss[0, 0])
    if not np.isfinite(val):
        raise FloatingPointError("non-finite loss; parameters have blown up")
    return val


def empirical_loss_and_grad(model: BnnModel, thetas: np.ndarray, X, y, need_grad: bool = True):
    """Average NLL ``Lhat(theta, S)`` for a stack of hypotheses ``(L, n_theta)``.

    Returns:
        ``(losses (L,), grads (L, n_theta) or None)``.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    m = y.shape[0]
    w, ls = _split_theta(model, thetas)
    out, cache = forward_with_cache(model.arch, w, X)
    loss, d_out, d_ls = pointwise_nll(model, out, ls, y)
    Lhat = loss.mean(axis=1)
    if not need_grad:
        return Lhat, None
    g_w, _ = backward_from_cache(model.arch, cache, d_out / m)
    if model.has_noise_coord:
        return Lhat, np.concatenate([g_w, d_ls.mean(axis=1)[:, None]], axis=1)
    return Lhat, g_w


def predict_outputs(model: BnnModel, thetas: np.ndarray, X) -> tuple[np.ndarray, np.ndarray]:
    """Network outputs ``(L, N, C)`` and noise stds ``(L,)`` for a particle stack."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    w, ls = _split_theta(model, thetas)
    out, _ = forward_with_cache(model.arch, w, np.atleast_2d(np.asarray(X, dtype=float)))
    return out, np.exp(ls)


# ---------------------------------------------------------------------------
# log-sum-exp estimator
# ---------------------------------------------------------------------------

def mll_lse_with_eps(model: BnnModel, phi, tasks, betas, eps, coeffs, need_grad: bool = True):
    """LSE estimates for several tasks with shared prior samples.

    ``h_l = mu_P + sigma_P * eps_l`` are shared across ``tasks``. The gradient
    returned is that of ``sum_i coeffs[i] * logZhat_i`` with respect to
    ``phi``.

    Returns:
        ``(list of MllEstimate, gradient (dim,) or None)``.
    """
    prior = model.prior(phi)
    sigma = prior.std
    eps = np.atleast_2d(eps)
    n_samples = eps.shape[0]
    thetas = prior.mean + sigma * eps
    w, ls = _split_theta(model, thetas)

    sizes = np.array([t.m for t in tasks])
    X = np.concatenate([t.inputs for t in tasks])
    y = np.concatenate([t.targets for t in tasks])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    seg = np.repeat(np.arange(len(tasks)), sizes)

    out, cache = forward_with_cache(model.arch, w, X)
    loss, d_out, d_ls = pointwise_nll(model, out, ls, y)
    Lhat = np.add.reduceat(loss, starts, axis=1) / sizes[None, :]
    capped = ~(Lhat < LOSS_CAP)
    Lhat = np.where(capped, LOSS_CAP, Lhat)
    betas = np.asarray(betas, dtype=float)
    a = -betas[None, :] * Lhat
    values = special.logsumexp(a, axis=0) - np.log(n_samples)
    weights = special.softmax(a, axis=0)
    estimates = [MllEstimate(float(values[i]), Lhat[:, i].copy(), weights[:, i].copy())
                 for i in range(len(tasks))]
    if not need_grad:
        return estimates, None

    coeffs = np.asarray(coeffs, dtype=float)
    # d(sum_i c_i logZ_i) / d(loss_lj) for point j in task i
    per_task = -(coeffs * betas)[None, :] * weights * (~capped) / sizes[None, :]
    u = per_task[:, seg]
    g_w, _ = backward_from_cache(model.arch, cache, d_out * u[..., None])
    if model.has_noise_coord:
        g_theta = np.concatenate([g_w, np.sum(u * d_ls, axis=1)[:, None]], axis=1)
    else:
        g_theta = g_w
    g_mu = g_theta.sum(axis=0)
    g_log_sigma = np.sum(g_theta * eps, axis=0) * sigma
    return estimates, np.concatenate([g_mu, g_log_sigma])


def mll_estimate_lse(model: BnnModel, phi, task, beta: float, L: int, rng: RngStream) -> MllEstimate:
    """Log-sum-exp estimate of ``log Z_beta(S, P_phi)`` from ``L`` prior samples."""
    if L < 1 or beta <= 0:
        raise ValueError("need L >= 1 and beta > 0")
    eps = rng.normal(size=(L, model.n_theta))
    est, _ = mll_lse_with_eps(model, phi, [task], [beta], eps, [1.0], need_grad=False)
    return est[0]


def mll_grad_lse(model: BnnModel, phi, task, beta: float, L: int, rng: RngStream) -> np.ndarray:
    """Gradient of :func:`mll_estimate_lse` with respect to ``phi``.

    Called with a stream in the same state as the paired estimate, it uses the
    same ``eps`` draws.
    """
    if L < 1 or beta <= 0:
        raise ValueError("need L >= 1 and beta > 0")
    eps = rng.normal(size=(L, model.n_theta))
    _, grad = mll_lse_with_eps(model, phi, [task], [beta], eps, [1.0])
    return grad
