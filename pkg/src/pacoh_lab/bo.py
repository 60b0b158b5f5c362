"""Bayesian optimisation over a discrete candidate pool with BNN posteriors.

Posterior particles come from :func:`pacoh_lab.pacoh_meta.target_train`
run on the data collected so far, with either meta-learned priors or the
standard prior. Acquisition is UCB on the particle mean and epistemic std,
or Thompson sampling by drawing one particle uniformly.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .bnn_prior import BnnModel, predict_outputs
from .environments import BanditPool, TaskDataset
from .evaluation import regret_curves
from .numerics import RngStream
from .pacoh_meta import HyperPosteriorApprox, TargetTrainConfig, target_train

logger = logging.getLogger(__name__)

ALGORITHMS = ("ucb", "ts")
_PRIORS, _INIT, _ROUNDS = 0, 1, 2


class EmptyPool(ValueError):
    """No candidates or no particles to choose from."""


def _check_preds(preds) -> np.ndarray:
    preds = np.atleast_2d(np.asarray(preds, dtype=float))
    if preds.size == 0 or preds.shape[1] == 0:
        raise EmptyPool("need at least one particle and one candidate")
    return preds


def ucb_select(preds, beta_ucb: float = 2.0) -> int:
    """UCB action from per-particle predictions ``(n_particles, n_arms)``.

    Returns ``argmax_a mean(a) + beta_ucb * std(a)`` where mean and std are
    taken over particles (population std, i.e. the epistemic spread only).
    ``np.argmax`` returns the first maximiser, so ties go to the lowest index.
    """
    preds = _check_preds(preds)
    score = preds.mean(axis=0) + beta_ucb * preds.std(axis=0)
    return int(np.argmax(score))


def ts_select(preds, rng: RngStream) -> int:
    """Thompson sampling: argmax of one uniformly drawn particle's predictions."""
    preds = _check_preds(preds)
    row = int(rng.integers(preds.shape[0]))
    return int(np.argmax(preds[row]))


@dataclass
class BoHistory:
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    summary_hashes: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)

    def regret(self, r_star: float) -> tuple[np.ndarray, np.ndarray]:
        return regret_curves(self.rewards, r_star)

    def rows(self, r_star: float) -> list[tuple]:
        """``(t, action, reward, avg_regret, simple_regret)`` per round, ``t`` from 1."""
        avg, simple = self.regret(r_star)
        return [(t + 1, a, r, avg[t], simple[t])
                for t, (a, r) in enumerate(zip(self.actions, self.rewards))]


def _summary_hash(preds: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(preds.mean(axis=0)).tobytes()).hexdigest()[:16]


def pool_predictions(model: BnnModel, particles: np.ndarray, approx: HyperPosteriorApprox,
                     candidates: np.ndarray) -> np.ndarray:
    """Per-particle predicted means on all candidates ``(n_particles, n_arms)``, original units."""
    nz = approx.normalizer
    flat = particles.reshape(-1, model.n_theta)
    out, _ = predict_outputs(model, flat, nz.transform_inputs(candidates))
    return out[..., 0] * nz.y_std + nz.y_mean


def run_bo(pool: BanditPool, task: int, approx: HyperPosteriorApprox, T: int, algorithm: str,
           target_cfg: TargetTrainConfig = TargetTrainConfig(), rng: RngStream | None = None,
           beta_ucb: float = 2.0, warm_start: bool = True, warm_steps: int | None = None) -> BoHistory:
    """Sequential pool bandit on reward vector ``pool.rewards[task]``.

    Round 1 queries a uniformly random arm. Every later round refits the
    posterior particles on all observations so far and picks the next arm
    with ``algorithm`` (``"ucb"`` or ``"ts"``). Arms may be re-selected.

    Args:
        pool: candidate features and reward vectors.
        task: row of ``pool.rewards`` to optimise.
        approx: priors (meta-learned or standard) with their normaliser.
        T: number of rounds.
        algorithm: acquisition rule.
        target_cfg: posterior SVGD settings for a cold start.
        rng: random stream; the run is deterministic given it.
        beta_ucb: exploration weight of UCB.
        warm_start: continue from the previous round's particles instead of
            re-drawing them from the priors.
        warm_steps: SVGD steps for warm-started rounds (default: a quarter
            of ``target_cfg.steps``).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if algorithm not in ALGORITHMS:
        raise ValueError(f"algorithm must be one of {ALGORITHMS}")
    if pool.size == 0:
        raise EmptyPool("empty candidate pool")
    rng = rng if rng is not None else RngStream(0)
    model = approx.model
    rewards = pool.rewards[task]
    priors = approx.priors(rng=rng.fork(_PRIORS))
    hist = BoHistory()
    a0 = int(rng.fork(_INIT).integers(pool.size))
    hist.actions.append(a0)
    hist.rewards.append(float(rewards[a0]))
    hist.summary_hashes.append("")
    particles = None
    warm_cfg = TargetTrainConfig(**{**target_cfg.__dict__,
                                    "steps": warm_steps if warm_steps is not None
                                    else max(1, target_cfg.steps // 4)})
    for t in range(1, T):
        r = rng.fork(_ROUNDS).fork(t)
        data = TaskDataset(pool.candidates[hist.actions], np.array(hist.rewards), task_id=task)
        ntask = approx.normalizer.transform(data)
        if warm_start and particles is not None:
            particles = target_train(model, priors, ntask, warm_cfg, init=particles)
        else:
            particles = target_train(model, priors, ntask, target_cfg, r.fork(0))
        preds = pool_predictions(model, particles, approx, pool.candidates)
        a = ucb_select(preds, beta_ucb) if algorithm == "ucb" else ts_select(preds, r.fork(1))
        hist.actions.append(a)
        hist.rewards.append(float(rewards[a]))
        hist.summary_hashes.append(_summary_hash(preds))
        logger.debug("round %d action %d reward %.4f", t + 1, a, rewards[a])
    return hist
