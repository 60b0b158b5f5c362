"""PACOH meta-learning: hyper-posterior score, MAP / SVGD / VI approximations,
mini-batched meta-training, SVGD target training for BNN priors and
equal-weight mixture predictions.

The unnormalised log density of the PAC-optimal hyper-posterior is

    log Q*(phi) = log P(phi) + sum_i lambda / (n beta_i + lambda) * log Z_beta_i(S_i, P_phi)

and every approximation below ascends (MAP, SVGD) or fits (VI) this target.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .bnn_prior import BnnModel, empirical_loss_and_grad, mll_lse_with_eps, predict_outputs
from .environments import Normalizer, TaskDataset
from .evaluation import CalibrationConfig, regression_calibration_error, rmse
from .gp_prior import GpModel, gp_multi_task_mll_grad, gp_posterior_predict
from .numerics import DiagonalGaussian, DivergenceDetected, RngStream

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# rng fork labels
_INIT, _BATCH, _POINTS, _EPS = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# configuration and containers
# ---------------------------------------------------------------------------

@dataclass
class MetaTrainConfig:
    """Settings of a meta-training run.

    ``method`` is ``"map"``, ``"svgd"`` or ``"vi"``. MAP is SVGD with a single
    particle and is stored as such (see :meth:`canonical`).
    ``lambda_beta`` selects ``(lambda, beta_i) = (n, m_i)`` (``"n_m"``) or
    ``(sqrt(n), sqrt(m_i))`` (``"sqrt"``). ``task_weight`` is ``"alg3"``
    (``lambda/(n beta_i + lambda)``) or ``"eq16"`` (``1/(m_i + 1)``).
    ``bandwidth`` is ``"median"`` or a fixed length-scale ``ell`` for the
    SVGD kernel ``exp(-||a-b||^2 / (2 ell))``. ``init_std`` (default: the
    hyper-prior std) is the spread of the initial particles around the
    hyper-prior centre; it lets a broad hyper-prior start from sensible
    networks.
    """

    method: str = "svgd"
    n_particles: int = 5
    n_samples: int = 5
    task_batch_size: int | None = None
    point_batch_size: int | None = None
    step_size: float = 1e-3
    iterations: int = 2000
    lambda_beta: str = "n_m"
    task_weight: str = "alg3"
    hyper_prior_std: float = 1.0
    init_std: float | None = None
    bandwidth: str | float = "median"
    vi_tempering: float = 0.1
    vi_samples: int = 5
    optimizer: str = "adam"
    mll_only: bool = False
    normalize: bool = True
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("map", "svgd", "vi"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0 < self.vi_tempering <= 1:
            raise ValueError("vi_tempering must lie in (0, 1]")
        if self.n_particles < 1 or self.n_samples < 1 or self.iterations < 0:
            raise ValueError("particle/sample counts must be >= 1 and iterations >= 0")
        if self.lambda_beta not in ("n_m", "sqrt"):
            raise ValueError("lambda_beta must be 'n_m' or 'sqrt'")
        if self.task_weight not in ("alg3", "eq16"):
            raise ValueError("task_weight must be 'alg3' or 'eq16'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.hyper_prior_std <= 0:
            raise ValueError("hyper_prior_std must be positive")
        if self.init_std is not None and self.init_std <= 0:
            raise ValueError("init_std must be positive")
        if not (self.bandwidth == "median" or (isinstance(self.bandwidth, (int, float))
                                               and self.bandwidth > 0)):
            raise ValueError("bandwidth must be 'median' or a positive length-scale")

    def canonical(self) -> "MetaTrainConfig":
        """MAP rewritten as single-particle SVGD."""
        if self.method == "map":
            return replace(self, method="svgd", n_particles=1)
        return self

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self.canonical()), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TargetTrainConfig:
    """SVGD settings for fitting BNN posteriors on a target task."""

    n_particles: int = 5
    steps: int = 300
    step_size: float = 1e-2
    beta: float | None = None
    bandwidth: str | float = "median"
    optimizer: str = "adam"


@dataclass
class HyperPosteriorApprox:
    """Particles (MAP/SVGD) or a diagonal Gaussian (VI) over prior parameters."""

    model: GpModel | BnnModel
    variant: str
    particles: np.ndarray | None = None
    vi: DiagonalGaussian | None = None
    normalizer: Normalizer | None = None
    config_hash: str = ""

    def __post_init__(self):
        if self.variant == "particles":
            self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
            if self.particles.shape[1] != self.model.dim:
                raise ValueError("particle dimension does not match the model")
        elif self.variant == "vi":
            if self.vi is None:
                raise ValueError("VI variant needs a DiagonalGaussian")
        else:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.normalizer is None:
            self.normalizer = Normalizer.identity(self.model.input_dim)

    def priors(self, n_vi: int = 100, rng: RngStream | None = None) -> np.ndarray:
        """Prior parameter vectors to average over at meta-test time."""
        if self.variant == "particles":
            return self.particles
        return self.vi.sample(rng if rng is not None else RngStream(0), n_vi)


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------

class Adam:
    """Adam moments for ascent (``x += step``)."""

    def __init__(self, shape, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, direction: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * direction
        self.v = self.b2 * self.v + (1 - self.b2) * direction * direction
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


class Sgd:
    def __init__(self, shape, lr: float):
        self.lr = lr

    def step(self, direction: np.ndarray) -> np.ndarray:
        return self.lr * direction


def make_optimizer(name: str, shape, lr: float):
    return Adam(shape, lr) if name == "adam" else Sgd(shape, lr)


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------

def lambda_beta(mode: str, n: int, sizes) -> tuple[float, np.ndarray]:
    sizes = np.asarray(sizes, dtype=float)
    if mode == "n_m":
        return float(n), sizes
    return float(np.sqrt(n)), np.sqrt(sizes)


def task_coefficients(n: int, sizes, lam: float, betas, weight: str = "alg3",
                      n_batch: int | None = None) -> np.ndarray:
    """Per-task factor in front of ``log Z_i`` including the ``n / n_bs`` rescaling."""
    sizes = np.asarray(sizes, dtype=float)
    betas = np.asarray(betas, dtype=float)
    nb = len(sizes) if n_batch is None else n_batch
    scale = n / nb if nb > 0 else 0.0
    if weight == "alg3":
        w = lam / (n * betas + lam)
    else:
        w = 1.0 / (sizes + 1.0)
    return scale * w


def pacoh_log_score(phi, batch: Sequence[TaskDataset], hyper_prior: DiagonalGaussian | None,
                    lam: float, betas, n: int,
                    logz_fn: Callable[[np.ndarray, TaskDataset, float], tuple[float, np.ndarray]],
                    weight: str = "alg3") -> tuple[float, np.ndarray]:
    """Unnormalised ``log Q*(phi)`` and its gradient on a task batch.

    Args:
        phi: prior parameters.
        batch: tasks in the mini-batch.
        hyper_prior: hyper-prior; ``None`` drops the term (marginal-likelihood-only mode).
        lam: meta-level temperature lambda.
        betas: per-task temperatures beta_i.
        n: total number of meta-training tasks.
        logz_fn: ``(phi, task, beta) -> (log Z, grad log Z)``.
        weight: ``"alg3"`` or ``"eq16"`` task weighting.
    """
    phi = np.asarray(phi, dtype=float)
    value, grad = 0.0, np.zeros_like(phi)
    if hyper_prior is not None:
        value += hyper_prior.logpdf(phi)
        grad += hyper_prior.grad_logpdf(phi)
    if len(batch) == 0:
        return value, grad
    coeffs = task_coefficients(n, [t.m for t in batch], lam, betas, weight, len(batch))
    for task, b, c in zip(batch, np.asarray(betas, dtype=float), coeffs):
        lz, g = logz_fn(phi, task, float(b))
        value += c * lz
        grad += c * g
    return float(value), grad


# ---------------------------------------------------------------------------
# SVGD
# ---------------------------------------------------------------------------

def svgd_bandwidth(particles: np.ndarray, policy: str | float = "median") -> float:
    """Denominator ``h`` of the kernel ``exp(-||a - b||^2 / h)``.

    ``"median"`` uses ``median(squared distances) / log(K + 1)``; a number is
    taken as the length-scale ``ell`` with ``h = 2 ell``.
    """
    if policy != "median":
        return 2.0 * float(policy)
    K = particles.shape[0]
    if K < 2:
        return 1.0
    sq = _sq_dists(particles)
    med = float(np.median(sq[np.triu_indices(K, 1)]))
    return med / np.log(K + 1.0) if med > 0 else 1.0


def _sq_dists(P: np.ndarray) -> np.ndarray:
    n2 = np.sum(P * P, axis=-1)
    sq = n2[..., :, None] + n2[..., None, :] - 2.0 * P @ np.swapaxes(P, -1, -2)
    sq = np.maximum(sq, 0.0)
    idx = np.arange(P.shape[-2])
    sq[..., idx, idx] = 0.0
    return sq


def svgd_direction(particles: np.ndarray, scores: np.ndarray, h: float) -> np.ndarray:
    """Stein direction ``(1/K) sum_k' [k(p_k', p_k) s_k' + grad_{p_k'} k(p_k', p_k)]``."""
    K = particles.shape[0]
    Kmat = np.exp(-_sq_dists(particles) / h)
    drive = Kmat @ scores
    repulse = (2.0 / h) * (Kmat.sum(axis=1)[:, None] * particles - Kmat @ particles)
    return (drive + repulse) / K


def svgd_step(particles: np.ndarray, score_fn: Callable[[np.ndarray], np.ndarray],
              bandwidth: str | float = "median", step_size: float = 1e-3) -> np.ndarray:
    """One plain SVGD update; ``score_fn`` maps a ``(K, dim)`` array to scores."""
    particles = np.atleast_2d(np.asarray(particles, dtype=float))
    scores = np.asarray(score_fn(particles), dtype=float)
    h = svgd_bandwidth(particles, bandwidth)
    return particles + step_size * svgd_direction(particles, scores, h)


# ---------------------------------------------------------------------------
# meta-training
# ---------------------------------------------------------------------------

def make_hyper_prior(model: GpModel | BnnModel, std: float) -> DiagonalGaussian:
    """Isotropic hyper-prior centred at zero (GP) or at the vanilla BNN prior."""
    centre = np.zeros(model.dim) if isinstance(model, GpModel) else model.hyper_prior_mean()
    return DiagonalGaussian(centre, np.full(model.dim, np.log(std)))


@dataclass
class _Batch:
    tasks: list
    coeffs: np.ndarray
    betas: np.ndarray


class _ScoreEvaluator:
    """Mini-batch construction and score evaluation shared by all methods."""

    def __init__(self, tasks, model, cfg: MetaTrainConfig, root: RngStream,
                 hyper_prior: DiagonalGaussian):
        self.tasks = sorted(tasks, key=lambda t: t.task_id)
        self.n = len(self.tasks)
        self.model = model
        self.cfg = cfg
        self.root = root
        self.hyper_prior = hyper_prior
        self.is_gp = isinstance(model, GpModel)

    def batch(self, it: int) -> _Batch:
        cfg = self.cfg
        nb = self.n if cfg.task_batch_size is None else min(cfg.task_batch_size, self.n)
        if nb < self.n:
            idx = np.sort(self.root.fork(_BATCH).fork(it).choice(self.n, nb, replace=False))
            chosen = [self.tasks[i] for i in idx]
        else:
            chosen = list(self.tasks)
        if cfg.point_batch_size is not None:
            sub = []
            for t in chosen:
                if t.m > cfg.point_batch_size:
                    r = self.root.fork(_POINTS).fork(it).fork(t.task_id)
                    sub.append(t.subset(np.sort(r.choice(t.m, cfg.point_batch_size, replace=False))))
                else:
                    sub.append(t)
            chosen = sub
        sizes = [t.m for t in chosen]
        lam, betas = lambda_beta(cfg.lambda_beta, self.n, sizes)
        if self.is_gp:
            betas = np.asarray(sizes, dtype=float)
            lam = float(self.n)
        coeffs = task_coefficients(self.n, sizes, lam, betas, cfg.task_weight, len(chosen))
        return _Batch(chosen, coeffs, betas)

    def data_term(self, phi, batch: _Batch, it: int, k: int, coeffs=None):
        """``sum_i c_i log Z_i(phi)`` and its gradient for one particle."""
        c = batch.coeffs if coeffs is None else coeffs
        if self.is_gp:
            vals, g = gp_multi_task_mll_grad(self.model.prior(phi), batch.tasks, c)
        else:
            eps = self.root.fork(_EPS).fork(it).fork(k).normal(
                size=(self.cfg.n_samples, self.model.n_theta))
            est, g = mll_lse_with_eps(self.model, phi, batch.tasks, batch.betas, eps, c)
            vals = np.array([e.value for e in est])
        return float(np.dot(c, vals)), g

    def score(self, phi, batch: _Batch, it: int, k: int):
        val, g = self.data_term(phi, batch, it, k)
        if not self.cfg.mll_only:
            val += self.hyper_prior.logpdf(phi)
            g = g + self.hyper_prior.grad_logpdf(phi)
        return val, g


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergenceDetected("non-finite score or parameters during meta-training")


def meta_train(tasks: Sequence[TaskDataset], cfg: MetaTrainConfig, model: GpModel | BnnModel,
               callback: Callable | None = None) -> tuple[HyperPosteriorApprox, list]:
    """Fit a hyper-posterior approximation to meta-training tasks.

    Args:
        tasks: meta-training tasks (ordering is irrelevant).
        cfg: run settings.
        model: GP or BNN prior family.
        callback: optional ``f(iteration, approx_state)`` hook.

    Returns:
        ``(approx, log)`` where ``log`` holds ``(iteration, mean score, grad norm)``
        rows every ``cfg.log_every`` iterations and at the end.
    """
    if len(tasks) < 1:
        raise ValueError("meta-training needs at least one task")
    if cfg.method == "vi" and not isinstance(model, GpModel):
        raise ValueError("VI is available for the GP prior family only")
    tasks = sorted(tasks, key=lambda t: t.task_id)
    normalizer = Normalizer.fit(tasks) if cfg.normalize else Normalizer.identity(tasks[0].dim)
    ntasks = [normalizer.transform(t) for t in tasks]
    root = RngStream(cfg.seed)
    hyper_prior = make_hyper_prior(model, cfg.hyper_prior_std)
    ev = _ScoreEvaluator(ntasks, model, cfg, root, hyper_prior)
    chash = cfg.config_hash()
    if cfg.method == "vi":
        approx, log = _train_vi(ev, cfg, callback)
    elif cfg.method == "map":
        approx, log = _train_map(ev, cfg, callback)
    else:
        approx, log = _train_svgd(ev, cfg, callback)
    approx.normalizer = normalizer
    approx.config_hash = chash
    return approx, log


def _init_particles(ev: _ScoreEvaluator, K: int) -> np.ndarray:
    """Draw initial particles from the hyper-prior, or from a narrower Gaussian
    with the same centre when ``init_std`` is set."""
    init = ev.hyper_prior
    if ev.cfg.init_std is not None:
        init = DiagonalGaussian(init.mean, np.full(init.dim, np.log(ev.cfg.init_std)))
    return np.stack([init.sample(ev.root.fork(_INIT).fork(k)) for k in range(K)])


def _train_map(ev: _ScoreEvaluator, cfg: MetaTrainConfig, callback):
    phi = _init_particles(ev, 1)[0]
    opt = make_optimizer(cfg.optimizer, phi.shape, cfg.step_size)
    log = []
    for it in range(cfg.iterations):
        batch = ev.batch(it)
        val, g = ev.score(phi, batch, it, 0)
        _check_finite(val, g)
        phi = phi + opt.step(g)
        _check_finite(phi)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            log.append((it, float(val), float(np.linalg.norm(g))))
        if callback is not None:
            callback(it, phi[None])
    return HyperPosteriorApprox(ev.model, "particles", phi[None]), log


def _train_svgd(ev: _ScoreEvaluator, cfg: MetaTrainConfig, callback):
    P = _init_particles(ev, cfg.n_particles)
    opt = make_optimizer(cfg.optimizer, P.shape, cfg.step_size)
    log = []
    for it in range(cfg.iterations):
        batch = ev.batch(it)
        vals = np.empty(P.shape[0])
        scores = np.empty_like(P)
        for k in range(P.shape[0]):
            vals[k], scores[k] = ev.score(P[k], batch, it, k)
        _check_finite(vals, scores)
        h = svgd_bandwidth(P, cfg.bandwidth)
        P = P + opt.step(svgd_direction(P, scores, h))
        _check_finite(P)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            log.append((it, float(vals.mean()), float(np.linalg.norm(scores) / np.sqrt(P.shape[0]))))
        if callback is not None:
            callback(it, P)
    return HyperPosteriorApprox(ev.model, "particles", P), log


def harmonic_mean(sizes) -> float:
    sizes = np.asarray(sizes, dtype=float)
    return float(len(sizes) / np.sum(1.0 / sizes))


def vi_objective_and_grad(mean, log_std, tasks: Sequence[TaskDataset], hyper_prior: DiagonalGaussian,
                          tempering: float, K: int, rng: RngStream,
                          logz_fn: Callable | None = None, model: GpModel | None = None,
                          n_total: int | None = None):
    """Reparametrised estimate of the VI objective and its gradient.

    ``J = -E_q[ mt/(mt+1) * sum_i log Z_i(phi) / m_i + eta (log P(phi) - log q(phi)) ]``
    with ``mt`` the harmonic mean of the task sizes and ``eta`` the tempering
    weight. Samples are ``phi_k = mean + exp(log_std) * eps_k`` with ``eps``
    drawn from ``rng``.

    Args:
        mean, log_std: variational parameters.
        tasks: (mini-batch of) meta-training tasks.
        hyper_prior: hyper-prior.
        tempering: weight eta on the KL part.
        K: number of samples.
        rng: random stream for ``eps``.
        logz_fn: optional ``(phi, tasks, coeffs) -> (sum_i c_i log Z_i, grad)``;
            defaults to the GP marginal likelihood of ``model``.
        model: GP prior family, used when ``logz_fn`` is omitted.
        n_total: total number of tasks when ``tasks`` is a mini-batch.

    Returns:
        ``(J, grad_mean, grad_log_std)``; minimise ``J``.
    """
    mean = np.asarray(mean, dtype=float)
    log_std = np.asarray(log_std, dtype=float)
    std = np.exp(log_std)
    q = DiagonalGaussian(mean, log_std)
    eps = rng.normal(size=(K, mean.shape[0]))
    sizes = np.array([t.m for t in tasks], dtype=float)
    n = len(tasks) if n_total is None else n_total
    if len(tasks):
        mt = harmonic_mean(sizes)
        coeffs = (n / len(tasks)) * (mt / (mt + 1.0)) / sizes
    else:
        coeffs = np.zeros(0)
    if logz_fn is None:
        def logz_fn(phi, ts, cs):
            vals, g = gp_multi_task_mll_grad(model.prior(phi), ts, cs)
            return float(np.dot(cs, vals)), g
    J = 0.0
    g_mean = np.zeros_like(mean)
    g_ls = np.zeros_like(mean)
    for k in range(K):
        phi = mean + std * eps[k]
        if len(tasks):
            data, g_data = logz_fn(phi, tasks, coeffs)
        else:
            data, g_data = 0.0, np.zeros_like(mean)
        inner = data + tempering * (hyper_prior.logpdf(phi) - q.logpdf(phi))
        g_phi = g_data + tempering * hyper_prior.grad_logpdf(phi)
        J -= inner / K
        g_mean -= g_phi / K
        g_ls -= g_phi * std * eps[k] / K
    # pathwise derivative of -log q(mean + std*eps) w.r.t. log_std is +1 per coordinate
    g_ls -= tempering
    return float(J), g_mean, g_ls


def _train_vi(ev: _ScoreEvaluator, cfg: MetaTrainConfig, callback):
    mean = ev.hyper_prior.mean.copy()
    log_std = ev.hyper_prior.log_std.copy()
    opt_m = make_optimizer(cfg.optimizer, mean.shape, cfg.step_size)
    opt_s = make_optimizer(cfg.optimizer, mean.shape, cfg.step_size)
    log = []
    for it in range(cfg.iterations):
        batch = ev.batch(it)
        rng = ev.root.fork(_EPS).fork(it)
        J, gm, gs = vi_objective_and_grad(mean, log_std, batch.tasks, ev.hyper_prior,
                                          cfg.vi_tempering, cfg.vi_samples, rng,
                                          model=ev.model, n_total=ev.n)
        _check_finite(J, gm, gs)
        mean = mean - opt_m.step(gm)
        log_std = log_std - opt_s.step(gs)
        _check_finite(mean, log_std)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            log.append((it, float(-J), float(np.sqrt(gm @ gm + gs @ gs))))
        if callback is not None:
            callback(it, mean[None])
    return HyperPosteriorApprox(ev.model, "vi", vi=DiagonalGaussian(mean, log_std)), log


# ---------------------------------------------------------------------------
# target training (BNN)
# ---------------------------------------------------------------------------

def target_train(model: BnnModel, priors: np.ndarray, task: TaskDataset,
                 cfg: TargetTrainConfig = TargetTrainConfig(), rng: RngStream | None = None,
                 init: np.ndarray | None = None) -> np.ndarray:
    """SVGD posterior particles for each prior on a (normalised) target task.

    The score of particle ``theta`` under prior ``k`` is
    ``grad log P_k(theta) - beta * grad Lhat(theta, S)`` with ``beta = m`` by
    default, i.e. the standard Bayesian posterior. SVGD runs independently
    within each group of ``L`` particles sharing a prior.

    Args:
        model: BNN prior family.
        priors: ``(K, dim)`` prior parameter vectors.
        task: target context data.
        cfg: SVGD settings.
        rng: stream for the initial draws ``theta ~ P_k``.
        init: optional ``(K, L, n_theta)`` warm start.

    Returns:
        ``(K, L, n_theta)`` particle array grouped by prior.
    """
    priors = np.atleast_2d(np.asarray(priors, dtype=float))
    K, L = priors.shape[0], cfg.n_particles
    dists = [model.prior(p) for p in priors]
    mu = np.stack([d.mean for d in dists])
    std = np.stack([d.std for d in dists])
    inv_var = 1.0 / std**2
    if init is not None:
        theta = np.array(init, dtype=float).reshape(K, L, model.n_theta)
    else:
        rng = rng if rng is not None else RngStream(0)
        theta = mu[:, None, :] + std[:, None, :] * rng.normal(size=(K, L, model.n_theta))
    if task.m == 0 or cfg.steps == 0:
        return theta
    beta = float(task.m) if cfg.beta is None else float(cfg.beta)
    opt = make_optimizer(cfg.optimizer, theta.shape, cfg.step_size)
    for _ in range(cfg.steps):
        flat = theta.reshape(K * L, -1)
        _, g_loss = empirical_loss_and_grad(model, flat, task.inputs, task.targets)
        score = -(theta - mu[:, None, :]) * inv_var[:, None, :] - beta * g_loss.reshape(theta.shape)
        if not np.all(np.isfinite(score)):
            raise DivergenceDetected("non-finite score during target training")
        direction = np.empty_like(theta)
        for k in range(K):
            h = svgd_bandwidth(theta[k], cfg.bandwidth)
            direction[k] = svgd_direction(theta[k], score[k], h)
        theta = theta + opt.step(direction)
    if not np.all(np.isfinite(theta)):
        raise DivergenceDetected("non-finite particles after target training")
    return theta


# ---------------------------------------------------------------------------
# predictive distributions
# ---------------------------------------------------------------------------

@dataclass
class GaussianMixturePredictive:
    """Equal-weight Gaussian mixture per query point.

    ``means`` and ``stds`` have shape ``(n_query, n_components)``.
    """

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.stds = np.broadcast_to(np.asarray(self.stds, dtype=float), self.means.shape)

    @property
    def mean(self) -> np.ndarray:
        return self.means.mean(axis=1)

    @property
    def variance(self) -> np.ndarray:
        second = np.mean(self.stds**2 + self.means**2, axis=1)
        return np.maximum(second - self.mean**2, 0.0)

    @property
    def epistemic_std(self) -> np.ndarray:
        return self.means.std(axis=1)

    def cdf(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float).reshape(-1, 1)
        return stats.norm.cdf(y, loc=self.means, scale=self.stds).mean(axis=1)

    def logpdf(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float).reshape(-1, 1)
        lp = stats.norm.logpdf(y, loc=self.means, scale=self.stds)
        return np.logaddexp.reduce(lp, axis=1) - np.log(self.means.shape[1])


@dataclass
class CategoricalMixturePredictive:
    """Equal-weight mixture of categorical distributions, ``probs`` of shape
    ``(n_query, n_components, n_classes)``."""

    probs: np.ndarray

    @property
    def class_probs(self) -> np.ndarray:
        return self.probs.mean(axis=1)

    def predict(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.class_probs
        return p.argmax(axis=1), p.max(axis=1)


def predict_mixture(component_means, component_stds) -> GaussianMixturePredictive:
    """Equal-weight mixture from per-component means/stds ``(n_query, n_comp)``."""
    return GaussianMixturePredictive(component_means, component_stds)


def predict_gp(approx: HyperPosteriorApprox, context: TaskDataset, Xq, n_vi: int = 100,
               rng: RngStream | None = None) -> GaussianMixturePredictive:
    """Mixture of GP posteriors, one per prior particle, in original units."""
    nz = approx.normalizer
    ctx = nz.transform(context)
    Xn = nz.transform_inputs(np.atleast_2d(Xq))
    means, stds = [], []
    for phi in approx.priors(n_vi, rng):
        pred = gp_posterior_predict(approx.model.prior(phi), ctx.inputs, ctx.targets, Xn)
        means.append(pred.mean * nz.y_std + nz.y_mean)
        stds.append(np.sqrt(pred.variance) * nz.y_std)
    return GaussianMixturePredictive(np.stack(means, 1), np.stack(stds, 1))


def predict_bnn(model: BnnModel, particles: np.ndarray, Xq, normalizer: Normalizer | None = None):
    """Mixture over all posterior particles ``(..., n_theta)`` in original units."""
    nz = normalizer if normalizer is not None else Normalizer.identity(model.input_dim)
    flat = np.asarray(particles, dtype=float).reshape(-1, model.n_theta)
    out, noise = predict_outputs(model, flat, nz.transform_inputs(np.atleast_2d(Xq)))
    if model.likelihood == "categorical":
        from scipy.special import softmax
        return CategoricalMixturePredictive(np.swapaxes(softmax(out, axis=-1), 0, 1))
    means = out[..., 0].T * nz.y_std + nz.y_mean
    stds = np.broadcast_to(noise[None, :] * nz.y_std, means.shape)
    return GaussianMixturePredictive(means, stds)


def evaluate_regression(approx: HyperPosteriorApprox, test_tasks, rng: RngStream,
                        target_cfg: TargetTrainConfig = TargetTrainConfig(),
                        calib: CalibrationConfig = CalibrationConfig()) -> list[dict]:
    """Target-train and score on each ``(context, query)`` pair.

    Returns:
        One dict per task with keys ``task_id``, ``rmse``, ``calib_err``.
    """
    rows = []
    for j, (ctx, query) in enumerate(test_tasks):
        if isinstance(approx.model, GpModel):
            pred = predict_gp(approx, ctx, query.inputs, rng=rng.fork(j))
        else:
            ntask = approx.normalizer.transform(ctx)
            post = target_train(approx.model, approx.priors(rng=rng.fork(j)), ntask, target_cfg,
                                rng.fork(j).fork(1))
            pred = predict_bnn(approx.model, post, query.inputs, approx.normalizer)
        rows.append({"task_id": int(ctx.task_id), "rmse": rmse(pred.mean, query.targets),
                     "calib_err": regression_calibration_error(pred.cdf(query.targets), calib)})
    return rows


def vanilla_approx(model: GpModel | BnnModel, tasks: Sequence[TaskDataset] | None = None,
                   normalize: bool = True) -> HyperPosteriorApprox:
    """Single prior at the hyper-prior centre (no meta-training).

    The normaliser is still fitted on ``tasks`` when given so that vanilla and
    meta-learned models see identically scaled data.
    """
    centre = make_hyper_prior(model, 1.0).mean
    nz = Normalizer.fit(tasks) if (normalize and tasks) else Normalizer.identity(model.input_dim)
    return HyperPosteriorApprox(model, "particles", centre[None], normalizer=nz)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def approx_to_dict(approx: HyperPosteriorApprox) -> dict:
    d = {"version": CHECKPOINT_VERSION, "kind": "pacoh_checkpoint",
         "model": approx.model.to_dict(), "variant": approx.variant,
         "normalizer": approx.normalizer.to_dict(), "config_hash": approx.config_hash}
    if approx.variant == "particles":
        d["particles"] = approx.particles.tolist()
    else:
        d["vi_mean"] = approx.vi.mean.tolist()
        d["vi_log_std"] = approx.vi.log_std.tolist()
    return d


def approx_from_dict(d: dict) -> HyperPosteriorApprox:
    if d.get("kind") != "pacoh_checkpoint" or d.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a supported checkpoint")
    md = d["model"]
    model = GpModel.from_dict(md) if md["kind"] == "gp" else BnnModel.from_dict(md)
    nz = Normalizer.from_dict(d["normalizer"])
    if d["variant"] == "particles":
        return HyperPosteriorApprox(model, "particles", np.array(d["particles"], dtype=float),
                                    normalizer=nz, config_hash=d["config_hash"])
    vi = DiagonalGaussian(np.array(d["vi_mean"]), np.array(d["vi_log_std"]))
    return HyperPosteriorApprox(model, "vi", vi=vi, normalizer=nz, config_hash=d["config_hash"])


def save_checkpoint(path, approx: HyperPosteriorApprox) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(approx_to_dict(approx), fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> HyperPosteriorApprox:
    with open(path) as fh:
        return approx_from_dict(json.load(fh))
