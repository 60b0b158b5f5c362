"""Command-line driver: ``pacoh-lab {bounds,meta-train,meta-test,bo}``.

Each subcommand reads an optional JSON config (unknown keys are rejected),
writes CSV/JSON artifacts into ``--out`` and returns exit code 0 on
success, 2 on configuration errors and 3 on numerical failures. Every CSV
starts with ``#`` comment lines giving the tool version, config hash and
seed. Logging verbosity follows ``PACOH_LAB_LOG`` (``error``, ``info`` or
``debug``).
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bnn_prior import BnnModel
from .bo import ALGORITHMS, run_bo
from .bounds import (BoundConfig, EffectiveSampleSizeTooLow, HyperPrior, OutOfValidityWindow,
                     ZeroOneLogZ, blr_complexity, blr_hyper_posterior, blr_log_z_batch,
                     blr_transfer_error, complexity_bounded, delta_improvement, log_z_matrix,
                     misclassification_transfer_error, pacoh_bound, per_task_bound,
                     zero_one_log_z_mc)
from .environments import (MetaDataset, Normalizer, gen_blr_env, gen_cauchy_env, gen_logreg_env,
                           gen_peptide_pool, gen_sinusoid_env, sample_logreg_task)
from .evaluation import CalibrationConfig, ece, regression_calibration_error, rmse
from .gp_prior import GpModel
from .numerics import NumericalError, RngStream
from .pacoh_meta import (HyperPosteriorApprox, MetaTrainConfig, TargetTrainConfig, approx_from_dict,
                         approx_to_dict, evaluate_regression, meta_train, predict_bnn, target_train,
                         vanilla_approx)

logger = logging.getLogger("pacoh_lab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


# ---------------------------------------------------------------------------
# configuration schema
# ---------------------------------------------------------------------------

@dataclass
class EnvConfig:
    """Meta-learning environment. ``name`` is one of sinusoid, cauchy, blr, logreg, peptide.

    For ``peptide``, ``n`` and ``m`` are the number and size of the
    meta-training tasks of the synthetic pool.
    """

    name: str = "sinusoid"
    n: int = 20
    m: int = 5
    n_test: int = 20
    m_query: int = 100

    def __post_init__(self):
        if self.name not in ("sinusoid", "cauchy", "blr", "logreg", "peptide"):
            raise ConfigError(f"unknown environment {self.name!r}")
        if self.n < 1 or self.m < 1 or self.n_test < 0 or self.m_query < 0:
            raise ConfigError("environment sizes must be positive")


@dataclass
class ModelConfig:
    """Prior family: a GP with neural mean/kernel or a BNN."""

    kind: str = "gp"
    hidden: list = field(default_factory=lambda: [32, 32, 32, 32])
    feature_dim: int = 2
    noise_var: float = 0.05
    likelihood: str = "gaussian"

    def __post_init__(self):
        if self.kind not in ("gp", "bnn"):
            raise ConfigError("model.kind must be 'gp' or 'bnn'")
        if not all(isinstance(h, int) and h > 0 for h in self.hidden):
            raise ConfigError("model.hidden must be a list of positive integers")

    def build(self, input_dim: int) -> GpModel | BnnModel:
        hidden = tuple(self.hidden)
        if self.kind == "gp":
            return GpModel(input_dim, hidden, hidden, self.feature_dim, self.noise_var)
        if self.likelihood == "categorical":
            return BnnModel(input_dim, hidden, output_dim=2, likelihood="categorical")
        return BnnModel(input_dim, hidden)


@dataclass
class BoundsExperiment:
    env: str = "blr"
    n_sweep: list = field(default_factory=lambda: [8, 16, 32, 64])
    m: int = 5
    delta: float = 0.1
    mode: str = "sqrt"
    mc_priors: int = 2000
    dirac: bool = False
    hyper_prior_std: float | None = None
    prior_std: float | None = None
    sigma2: float = 1.0
    n_test_tasks: int = 500
    logz_method: str = "quadrature"
    mc_draws: int = 10000
    posterior_loss: str = "zero_one"

    def __post_init__(self):
        if self.env not in ("blr", "logreg"):
            raise ConfigError("bounds.env must be 'blr' or 'logreg'")
        if not self.n_sweep or not all(isinstance(n, int) and n >= 1 for n in self.n_sweep):
            raise ConfigError("n_sweep must be a non-empty list of positive integers")
        if self.mode not in ("sqrt", "n_m"):
            raise ConfigError("mode must be 'sqrt' or 'n_m'")
        if self.logz_method not in ("quadrature", "mc"):
            raise ConfigError("logz_method must be 'quadrature' or 'mc'")
        if self.posterior_loss not in ("zero_one", "logistic"):
            raise ConfigError("posterior_loss must be 'zero_one' or 'logistic'")
        if self.sigma2 <= 0 or self.mc_priors < 2 or self.n_test_tasks < 2:
            raise ConfigError("sigma2 must be positive, mc_priors and n_test_tasks at least 2")


@dataclass
class MetaTrainExperiment:
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    meta_train: MetaTrainConfig = field(default_factory=MetaTrainConfig)


@dataclass
class MetaTestExperiment:
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    target_train: TargetTrainConfig = field(default_factory=TargetTrainConfig)
    seeds: list | None = None
    calibration_bins: int = 20


@dataclass
class BoExperiment:
    env: EnvConfig = field(default_factory=lambda: EnvConfig(name="peptide", n=5, m=200))
    model: ModelConfig = field(default_factory=lambda: ModelConfig(kind="bnn", hidden=[32, 32]))
    target_train: TargetTrainConfig = field(default_factory=lambda: TargetTrainConfig(steps=200))
    n_target_tasks: int = 2
    task: int = 0
    T: int = 50
    algorithms: list = field(default_factory=lambda: ["ts", "ucb"])
    seeds: list | None = None
    beta_ucb: float = 2.0
    warm_start: bool = True
    warm_steps: int | None = None

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if not self.algorithms or any(a not in ALGORITHMS for a in self.algorithms):
            raise ConfigError(f"algorithms must be a non-empty subset of {list(ALGORITHMS)}")
        if not 0 <= self.task < self.n_target_tasks:
            raise ConfigError("task must index one of the target tasks")


NESTED = {c.__name__: c for c in (EnvConfig, ModelConfig, MetaTrainConfig, TargetTrainConfig)}
# keys owned by command-line flags rather than the config file
RESERVED = {MetaTrainConfig: {"seed", "mll_only"}}


def build_config(cls, data: dict, where: str = "config"):
    """Instantiate dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    names = set(types) - RESERVED.get(cls, set())
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = NESTED.get(str(types[key]))
        kwargs[key] = build_config(sub, value, f"{where}.{key}") if sub else value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_experiment(cls, path: str | None) -> tuple[object, dict]:
    """Parse a config file; returns ``(config, raw dict with 'seed' removed)``."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    body = {k: v for k, v in raw.items() if k != "seed"}
    return build_config(cls, body), raw


def config_hash(cfg, seed: int, extra: dict | None = None) -> str:
    blob = {"config": dataclasses.asdict(cfg), "seed": seed, **(extra or {})}
    text = json.dumps(blob, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows, chash: str, seed: int) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# pacoh_lab {__version__}\n# config_hash {chash}\n# seed {seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_checkpoint(path: Path, approx: HyperPosteriorApprox, chash: str, seed: int) -> None:
    d = approx_to_dict(approx)
    d["header"] = {"tool": f"pacoh_lab {__version__}", "config_hash": chash, "seed": seed}
    with open(path, "w", newline="\n") as fh:
        json.dump(d, fh, sort_keys=True)
        fh.write("\n")


def read_checkpoint(path: str) -> HyperPosteriorApprox:
    try:
        with open(path) as fh:
            return approx_from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# environments
# ---------------------------------------------------------------------------

def build_env(cfg: EnvConfig, seed: int) -> MetaDataset:
    if cfg.name == "sinusoid":
        return gen_sinusoid_env(cfg.n, cfg.m, seed, n_test=cfg.n_test, m_query=cfg.m_query)
    if cfg.name == "cauchy":
        return gen_cauchy_env(cfg.n, cfg.m, seed, n_test=cfg.n_test, m_query=cfg.m_query)
    if cfg.name == "blr":
        return gen_blr_env(cfg.n, cfg.m, seed=seed, n_test=cfg.n_test, m_query=cfg.m_query)
    if cfg.name == "logreg":
        return gen_logreg_env(cfg.n, cfg.m, seed=seed, n_test=cfg.n_test, m_query=cfg.m_query)
    _, meta_tasks = gen_peptide_pool(seed, n_meta_tasks=cfg.n, meta_task_size=cfg.m)
    return MetaDataset(meta_tasks, [], {"name": "peptide", "n": cfg.n, "m": cfg.m}, seed)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

BOUND_COLUMNS = ["n", "m", "lam", "beta", "delta", "complexity_C", "psi1", "psi2", "pacoh_bound",
                 "pacoh_se", "per_task_bound", "per_task_se", "delta_improvement", "delta_se",
                 "empirical_error", "empirical_se"]


def _bound_rows_blr(cfg: BoundsExperiment, seed: int):
    sigma_P2 = (cfg.prior_std if cfg.prior_std is not None else 0.2) ** 2
    hp_std = 0.0 if cfg.dirac else (cfg.hyper_prior_std if cfg.hyper_prior_std is not None else 0.5)
    mu_T, sigma_T, sigma_eps = 0.2, 0.1, 1.0 / 3.0
    root = RngStream(seed)
    for n in cfg.n_sweep:
        env = gen_blr_env(n, cfg.m, seed=seed, n_test=cfg.n_test_tasks, m_query=0)
        bc = BoundConfig.with_mode(n, cfg.m, cfg.mode, delta=cfg.delta, mc_priors=cfg.mc_priors)
        C, psi1, psi2 = blr_complexity(env.train_tasks, bc, cfg.sigma2, 1.0, sigma_P2, hp_std**2,
                                       sigma_eps**2, mu_T, sigma_T**2)
        hyper = HyperPrior(np.zeros(env.train_tasks[0].dim), hp_std)

        def logz(task, mus, beta=bc.beta):
            return blr_log_z_batch(mus, task.inputs, task.targets, beta, cfg.sigma2, sigma_P2)

        M, _ = log_z_matrix(env.train_tasks, hyper, logz, cfg.mc_priors, root.fork(n))
        pb = pacoh_bound(None, None, bc, C, logz=M)
        tb = per_task_bound(None, None, bc, C, logz=M)
        dlt, dse = delta_improvement(None, None, bc.lam, bc.beta, logz=M)
        if hp_std > 0:
            qs = blr_hyper_posterior(env.train_tasks, bc.lam, bc.beta, cfg.sigma2, sigma_P2,
                                     hyper.mean, hp_std**2)
            mu_mean, mu_cov = qs.mean, qs.cov
        else:
            mu_mean, mu_cov = hyper.mean, np.zeros((hyper.mean.size,) * 2)
        err, ese = blr_transfer_error([c for c, _ in env.test_tasks], mu_mean, mu_cov, bc.beta,
                                      cfg.sigma2, sigma_P2, 1.0, sigma_eps**2)
        yield [n, cfg.m, bc.lam, bc.beta, cfg.delta, C, psi1, psi2, pb.total, pb.mc_std_error,
               tb.total, tb.mc_std_error, dlt, dse, err, ese]


def _bound_rows_logreg(cfg: BoundsExperiment, seed: int):
    sigma_P = cfg.prior_std if cfg.prior_std is not None else 10.0
    hp_std = 0.0 if cfg.dirac else (cfg.hyper_prior_std if cfg.hyper_prior_std is not None else 20.0)
    mu_T, sigma_T = 10.0, 3.0
    root = RngStream(seed)
    for n in cfg.n_sweep:
        env = gen_logreg_env(n, cfg.m, seed=seed, mu_T=mu_T, sigma_T=sigma_T, n_test=1, m_query=0)
        bc = BoundConfig.with_mode(n, cfg.m, cfg.mode, delta=cfg.delta, mc_priors=cfg.mc_priors)
        C = complexity_bounded(bc)
        hyper = HyperPrior(np.zeros(2), hp_std)
        rng = root.fork(n)
        mus = hyper.sample(rng.fork(0), cfg.mc_priors)
        if cfg.logz_method == "quadrature":
            M = ZeroOneLogZ(sigma_P, bc.beta).matrix(mus, env.train_tasks)
        else:
            eps_rng = rng.fork(1)
            M = np.array([[zero_one_log_z_mc(t, mu, sigma_P, bc.beta, cfg.mc_draws, eps_rng.fork(i))
                           for i, t in enumerate(env.train_tasks)] for mu in mus])
        pb = pacoh_bound(None, None, bc, C, logz=M)
        tb = per_task_bound(None, None, bc, C, logz=M)
        dlt, dse = delta_improvement(None, None, bc.lam, bc.beta, logz=M)
        rho = bc.lam / (n * bc.beta + bc.lam)

        def sampler(r, _d=2):
            w = mu_T + sigma_T * r.fork(0).normal(size=_d)
            return sample_logreg_task(r.fork(1), cfg.m, w)

        err, ese = misclassification_transfer_error(sampler, mus, rho * M.sum(axis=1), sigma_P,
                                                    bc.beta, rng.fork(2), n_tasks=cfg.n_test_tasks,
                                                    posterior_loss=cfg.posterior_loss)
        yield [n, cfg.m, bc.lam, bc.beta, cfg.delta, C, (bc.beta / (8 * cfg.m)),
               bc.lam / (8 * n), pb.total, pb.mc_std_error, tb.total, tb.mc_std_error, dlt, dse,
               err, ese]


def cmd_bounds(args) -> int:
    cfg, _ = load_experiment(BoundsExperiment, args.config)
    seed = _seed(args)
    chash = config_hash(cfg, seed)
    rows_fn = _bound_rows_blr if cfg.env == "blr" else _bound_rows_logreg
    rows = list(rows_fn(cfg, seed))
    write_csv(_out(args) / "bounds.csv", BOUND_COLUMNS, rows, chash, seed)
    return EXIT_OK


def cmd_meta_train(args) -> int:
    exp, raw = load_experiment(MetaTrainExperiment, args.config)
    seed = _seed(args)
    mt = dataclasses.replace(exp.meta_train, seed=seed, mll_only=bool(args.mll_only))
    exp = dataclasses.replace(exp, meta_train=mt)
    env = build_env(exp.env, seed)
    model = exp.model.build(env.train_tasks[0].dim)
    chash = config_hash(exp, seed)
    approx, log = meta_train(env.train_tasks, mt, model)
    out = _out(args)
    write_checkpoint(Path(args.checkpoint) if args.checkpoint else out / "checkpoint.json",
                     approx, chash, seed)
    write_csv(out / "meta_train_log.csv", ["iter", "score", "grad_norm"], log, chash, seed)
    return EXIT_OK


def _classification_rows(approx: HyperPosteriorApprox, test_tasks, rng: RngStream,
                         tcfg: TargetTrainConfig, calib: CalibrationConfig):
    rows = []
    for j, (ctx, query) in enumerate(test_tasks):
        ntask = approx.normalizer.transform_inputs(ctx.inputs)
        task = dataclasses.replace(ctx, inputs=ntask, targets=ctx.targets.astype(int))
        post = target_train(approx.model, approx.priors(rng=rng.fork(j)), task, tcfg,
                            rng.fork(j).fork(1))
        pred, conf = predict_bnn(approx.model, post, query.inputs, approx.normalizer).predict()
        labels = query.targets.astype(int)
        rows.append({"task_id": int(ctx.task_id), "accuracy": float(np.mean(pred == labels)),
                     "ece": ece(conf, pred, labels, calib)})
    return rows


META_TEST_COLUMNS = ["seed", "task_id", "rmse", "calib_err", "accuracy", "ece"]


def cmd_meta_test(args) -> int:
    exp, _ = load_experiment(MetaTestExperiment, args.config)
    seed = _seed(args)
    seeds = exp.seeds if exp.seeds is not None else [seed]
    approx = read_checkpoint(args.checkpoint) if args.checkpoint else None
    calib = CalibrationConfig(exp.calibration_bins)
    rows = []
    for s in seeds:
        env = build_env(exp.env, s)
        if not env.test_tasks:
            raise ConfigError("environment has no meta-test tasks")
        ap = approx if approx is not None else vanilla_approx(
            exp.model.build(env.train_tasks[0].dim), env.train_tasks)
        rng = RngStream(s).fork(7)
        is_cls = isinstance(ap.model, BnnModel) and ap.model.likelihood == "categorical"
        if is_cls:
            for r in _classification_rows(ap, env.test_tasks, rng, exp.target_train, calib):
                rows.append([s, r["task_id"], np.nan, np.nan, r["accuracy"], r["ece"]])
        else:
            for r in evaluate_regression(ap, env.test_tasks, rng, exp.target_train, calib):
                rows.append([s, r["task_id"], r["rmse"], r["calib_err"], np.nan, np.nan])
    chash = config_hash(exp, seed, {"checkpoint": approx.config_hash if approx else "vanilla"})
    out = _out(args)
    write_csv(out / "meta_test.csv", META_TEST_COLUMNS, rows, chash, seed)
    table = np.array([r[2:] for r in rows], dtype=float)
    per_seed = np.array([np.mean(table[[r[0] == s for r in rows]], axis=0) for s in seeds])
    summary = [[name, float(np.mean(per_seed[:, i])), float(np.std(per_seed[:, i]))]
               for i, name in enumerate(META_TEST_COLUMNS[2:])]
    write_csv(out / "meta_test_summary.csv", ["metric", "mean", "std"], summary, chash, seed)
    return EXIT_OK


BO_COLUMNS = ["prior", "algorithm", "seed", "t", "action", "reward", "avg_regret", "simple_regret"]


def cmd_bo(args) -> int:
    exp, _ = load_experiment(BoExperiment, args.config)
    if exp.env.name != "peptide":
        raise ConfigError("bo runs on the peptide pool environment")
    seed = _seed(args)
    seeds = exp.seeds if exp.seeds is not None else [seed]
    pool, meta_tasks = gen_peptide_pool(seed, n_meta_tasks=exp.env.n, meta_task_size=exp.env.m,
                                        n_target_tasks=exp.n_target_tasks)
    if args.checkpoint:
        approx, label = read_checkpoint(args.checkpoint), "pacoh"
    else:
        approx = vanilla_approx(exp.model.build(pool.candidates.shape[1]), meta_tasks)
        label = "standard"
    if not isinstance(approx.model, BnnModel) or approx.model.input_dim != pool.candidates.shape[1]:
        raise ConfigError("bo needs a BNN prior over the pool features")
    r_star = float(pool.rewards[exp.task].max())
    rows = []
    for alg in exp.algorithms:
        for s in seeds:
            hist = run_bo(pool, exp.task, approx, exp.T, alg, exp.target_train,
                          RngStream(s).fork(11), exp.beta_ucb, exp.warm_start, exp.warm_steps)
            rows.extend([label, alg, s, *row] for row in hist.rows(r_star))
    chash = config_hash(exp, seed, {"checkpoint": approx.config_hash or "standard"})
    write_csv(_out(args) / "bo.csv", BO_COLUMNS, rows, chash, seed)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _seed(args) -> int:
    return int(args.seed)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _configure_logging() -> None:
    level = os.environ.get("PACOH_LAB_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pacoh-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"pacoh_lab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    handlers = {"bounds": cmd_bounds, "meta-train": cmd_meta_train,
                "meta-test": cmd_meta_test, "bo": cmd_bo}
    for name, fn in handlers.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
        sp.add_argument("--checkpoint", help="checkpoint to write (meta-train) or read")
        if name == "meta-train":
            sp.add_argument("--mll-only", action="store_true",
                            help="drop the hyper-prior term from the meta-training score")
        sp.set_defaults(handler=fn, mll_only=False)
    return p


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if args.threads is not None and args.threads < 1:
        logger.error("--threads must be >= 1")
        return EXIT_CONFIG
    try:
        limits = contextlib.nullcontext()
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            limits = threadpool_limits(limits=args.threads)
        with limits:
            return args.handler(args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (NumericalError, OutOfValidityWindow, EffectiveSampleSizeTooLow, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001 - the exit-code contract has no other status
        logger.exception("unexpected failure: %s", exc)
        return EXIT_NUMERIC


def run() -> None:
    sys.exit(main())
