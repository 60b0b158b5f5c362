"""Reusable experiment drivers behind the scripts and the acceptance suite.

Each driver takes a seed and a config dataclass and returns plain numbers,
so that callers can aggregate medians over seeds or write tables.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .bnn_prior import BnnModel
from .bo import run_bo
from .environments import BanditPool, gen_peptide_pool, gen_sinusoid_env
from .gp_prior import GpModel
from .numerics import RngStream
from .pacoh_meta import (HyperPosteriorApprox, MetaTrainConfig, TargetTrainConfig,
                         evaluate_regression, meta_train, vanilla_approx)


@dataclass
class SinusoidBenchmark:
    """Sinusoid meta-learning benchmark for one model family."""

    model: str = "gp"
    n_tasks: int = 20
    m: int = 5
    n_test: int = 20
    m_query: int = 100
    meta_train: MetaTrainConfig = field(default_factory=MetaTrainConfig)
    target_train: TargetTrainConfig = field(default_factory=TargetTrainConfig)

    def build_model(self) -> GpModel | BnnModel:
        if self.model == "gp":
            return GpModel(1)
        if self.model == "bnn":
            return BnnModel(1)
        raise ValueError(f"unknown model {self.model!r}")


def gp_map_benchmark() -> SinusoidBenchmark:
    return SinusoidBenchmark(
        model="gp",
        meta_train=MetaTrainConfig(method="map", n_particles=1, iterations=2000, step_size=1e-2,
                                   hyper_prior_std=1.0, log_every=500))


def nn_svgd_benchmark() -> SinusoidBenchmark:
    return SinusoidBenchmark(
        model="bnn",
        meta_train=MetaTrainConfig(method="svgd", n_particles=5, n_samples=5, iterations=2000,
                                   step_size=3e-3, hyper_prior_std=3.0, init_std=0.3, log_every=500),
        target_train=TargetTrainConfig(n_particles=5, steps=100, step_size=3e-3))


def _summarise(rows: list[dict]) -> tuple[float, float]:
    return float(np.mean([r["rmse"] for r in rows])), float(np.mean([r["calib_err"] for r in rows]))


def run_sinusoid_benchmark(cfg: SinusoidBenchmark, seed: int) -> dict:
    """Meta-train on one seeded sinusoid environment and compare against the vanilla prior.

    Returns mean test RMSE and calibration error of both models plus the
    meta-training wall time.
    """
    env = gen_sinusoid_env(cfg.n_tasks, cfg.m, seed, n_test=cfg.n_test, m_query=cfg.m_query)
    model = cfg.build_model()
    t0 = time.perf_counter()
    approx, _ = meta_train(env.train_tasks, dataclasses.replace(cfg.meta_train, seed=seed), model)
    seconds = time.perf_counter() - t0
    rng = RngStream(seed).fork(7)
    pacoh = _summarise(evaluate_regression(approx, env.test_tasks, rng, cfg.target_train))
    vanilla = _summarise(evaluate_regression(vanilla_approx(model, env.train_tasks), env.test_tasks,
                                             rng, cfg.target_train))
    return {"seed": seed, "pacoh_rmse": pacoh[0], "pacoh_calib": pacoh[1],
            "vanilla_rmse": vanilla[0], "vanilla_calib": vanilla[1], "train_seconds": seconds}


@dataclass
class OverfittingConfig:
    """Meta-overfitting ablation: PACOH versus marginal-likelihood-only meta-training.

    Meta-training tasks have ``m_train`` points. The meta-train-task error
    conditions on the first ``context`` of them and predicts the rest;
    meta-test tasks use ``context`` points and ``m_query`` query points.
    """

    n_values: tuple = (5, 10, 20)
    m_train: int = 20
    context: int = 5
    n_test: int = 20
    m_query: int = 100
    meta_train: MetaTrainConfig = field(default_factory=lambda: gp_map_benchmark().meta_train)
    target_train: TargetTrainConfig = field(default_factory=TargetTrainConfig)


def overfitting_gap(cfg: OverfittingConfig, n: int, seed: int, mll_only: bool) -> dict:
    """Meta-test RMSE, meta-train-task RMSE and their difference for one run."""
    env = gen_sinusoid_env(n, cfg.m_train, seed, n_test=cfg.n_test, m_query=cfg.m_query)
    mt = dataclasses.replace(cfg.meta_train, seed=seed, mll_only=mll_only)
    approx, _ = meta_train(env.train_tasks, mt, GpModel(1))
    rng = RngStream(seed).fork(7)
    c = cfg.context
    train_pairs = [(t.subset(np.arange(c)), t.subset(np.arange(c, t.m))) for t in env.train_tasks]
    test_pairs = [(ctx.subset(np.arange(min(c, ctx.m))), q) for ctx, q in env.test_tasks]
    train_rmse, _ = _summarise(evaluate_regression(approx, train_pairs, rng.fork(0), cfg.target_train))
    test_rmse, _ = _summarise(evaluate_regression(approx, test_pairs, rng.fork(1), cfg.target_train))
    return {"seed": seed, "n": n, "mll_only": mll_only, "train_rmse": train_rmse,
            "test_rmse": test_rmse, "gap": test_rmse - train_rmse}


@dataclass
class BoComparison:
    """Pool-based BO with meta-learned versus standard BNN priors."""

    hidden: tuple = (32, 32)
    n_meta_tasks: int = 5
    meta_task_size: int = 200
    task: int = 0
    T: int = 50
    algorithms: tuple = ("ts", "ucb")
    beta_ucb: float = 2.0
    meta_train: MetaTrainConfig = field(default_factory=lambda: MetaTrainConfig(
        method="svgd", n_particles=5, n_samples=5, iterations=1000, step_size=3e-3,
        hyper_prior_std=3.0, init_std=0.3, point_batch_size=50, log_every=250))
    target_train: TargetTrainConfig = field(default_factory=lambda: TargetTrainConfig(
        n_particles=5, steps=100, step_size=3e-3))
    warm_steps: int | None = 25


def meta_train_pool_prior(cfg: BoComparison, pool_seed: int = 0
                          ) -> tuple[BanditPool, HyperPosteriorApprox, HyperPosteriorApprox]:
    """Build the synthetic pool and return it with meta-learned and standard priors."""
    pool, meta_tasks = gen_peptide_pool(pool_seed, n_meta_tasks=cfg.n_meta_tasks,
                                        meta_task_size=cfg.meta_task_size)
    model = BnnModel(pool.candidates.shape[1], cfg.hidden)
    approx, _ = meta_train(meta_tasks, dataclasses.replace(cfg.meta_train, seed=pool_seed), model)
    return pool, approx, vanilla_approx(model, meta_tasks)


def bo_simple_regret(cfg: BoComparison, pool: BanditPool, approx: HyperPosteriorApprox,
                     algorithm: str, seed: int) -> np.ndarray:
    """Simple-regret curve of one BO run, length ``cfg.T``."""
    hist = run_bo(pool, cfg.task, approx, cfg.T, algorithm, cfg.target_train,
                  RngStream(seed).fork(11), cfg.beta_ucb, True, cfg.warm_steps)
    _, simple = hist.regret(float(pool.rewards[cfg.task].max()))
    return simple


__all__ = ["SinusoidBenchmark", "gp_map_benchmark", "nn_svgd_benchmark", "run_sinusoid_benchmark",
           "OverfittingConfig", "overfitting_gap", "BoComparison", "meta_train_pool_prior",
           "bo_simple_regret"]
