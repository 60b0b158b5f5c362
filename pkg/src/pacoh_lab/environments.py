"""Synthetic meta-learning environments and their JSON serialisation.

Every generator is a pure function of its arguments. Task ``i`` of a split
draws from its own forked random stream, so the first ``n`` training tasks of
an environment with ``n' > n`` tasks are identical to the tasks of the
smaller environment. Test task ids live in a separate range so train and test
ids never collide.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .numerics import RngStream, cholesky_jittered

SCHEMA_VERSION = 1
TEST_ID_OFFSET = 1_000_000

_TRAIN, _TEST, _TRAIN_QUERY, _POOL = 1, 2, 3, 4


@dataclass
class TaskDataset:
    """Samples ``(inputs, targets)`` of one task plus optional ground truth."""

    inputs: np.ndarray
    targets: np.ndarray
    task_id: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs[:, None]
        self.targets = np.asarray(self.targets, dtype=float).ravel()
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets must have the same length")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("task data must be finite")

    @property
    def m(self) -> int:
        return self.targets.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "TaskDataset":
        return TaskDataset(self.inputs[idx], self.targets[idx], self.task_id, self.meta)

    def to_dict(self) -> dict:
        return {"task_id": int(self.task_id), "rows": int(self.inputs.shape[0]),
                "cols": int(self.inputs.shape[1]),
                "inputs": self.inputs.ravel().tolist(), "targets": self.targets.tolist(),
                "meta": _jsonable(self.meta)}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskDataset":
        X = np.array(d["inputs"], dtype=float).reshape(d["rows"], d["cols"])
        return cls(X, np.array(d["targets"], dtype=float), int(d["task_id"]), _from_jsonable(d["meta"]))


@dataclass
class MetaDataset:
    """Meta-training tasks plus (context, query) pairs for meta-testing.

    ``train_queries`` optionally holds held-out samples of each training task,
    used to measure the error on meta-training tasks.
    """

    train_tasks: list
    test_tasks: list
    env: dict = field(default_factory=dict)
    seed: int = 0
    train_queries: list | None = None

    def __post_init__(self):
        train_ids = {t.task_id for t in self.train_tasks}
        test_ids = {c.task_id for c, _ in self.test_tasks}
        if train_ids & test_ids:
            raise ValueError("train and test task ids overlap")

    @property
    def n(self) -> int:
        return len(self.train_tasks)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION, "kind": "meta_dataset", "env": _jsonable(self.env),
            "seed": int(self.seed),
            "train_tasks": [t.to_dict() for t in self.train_tasks],
            "test_tasks": [[c.to_dict(), q.to_dict()] for c, q in self.test_tasks],
            "train_queries": None if self.train_queries is None
            else [t.to_dict() for t in self.train_queries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetaDataset":
        _check_schema(d, "meta_dataset")
        tq = d.get("train_queries")
        return cls([TaskDataset.from_dict(t) for t in d["train_tasks"]],
                   [(TaskDataset.from_dict(c), TaskDataset.from_dict(q)) for c, q in d["test_tasks"]],
                   _from_jsonable(d["env"]), int(d["seed"]),
                   None if tq is None else [TaskDataset.from_dict(t) for t in tq])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "MetaDataset":
        return cls.from_dict(json.loads(s))


@dataclass
class BanditPool:
    """Discrete candidate pool with one reward vector per target task."""

    candidates: np.ndarray
    rewards: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.candidates = np.asarray(self.candidates, dtype=float)
        self.rewards = np.atleast_2d(np.asarray(self.rewards, dtype=float))
        if self.rewards.shape[1] != self.candidates.shape[0]:
            raise ValueError("reward vectors must cover every candidate")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")

    @property
    def size(self) -> int:
        return self.candidates.shape[0]

    @property
    def optimum(self) -> np.ndarray:
        return np.argmax(self.rewards, axis=1)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "kind": "bandit_pool", "seed": int(self.seed),
                "rows": int(self.candidates.shape[0]), "cols": int(self.candidates.shape[1]),
                "candidates": self.candidates.ravel().tolist(),
                "n_tasks": int(self.rewards.shape[0]), "rewards": self.rewards.ravel().tolist(),
                "optimum": self.optimum.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BanditPool":
        _check_schema(d, "bandit_pool")
        X = np.array(d["candidates"], dtype=float).reshape(d["rows"], d["cols"])
        R = np.array(d["rewards"], dtype=float).reshape(d["n_tasks"], d["rows"])
        return cls(X, R, int(d["seed"]))


def _check_schema(d: dict, kind: str):
    if d.get("kind") != kind:
        raise ValueError(f"expected a {kind} document, got {d.get('kind')!r}")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {d.get('schema_version')!r}")


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.ravel().tolist(), "shape": list(obj.shape)}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _from_jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=float).reshape(obj["shape"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_from_jsonable(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# output normalisation used by the neural meta-learners
# ---------------------------------------------------------------------------

@dataclass
class Normalizer:
    """Affine standardisation of inputs and targets fitted on meta-training data."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim), 0.0, 1.0)

    @classmethod
    def fit(cls, tasks) -> "Normalizer":
        X = np.concatenate([t.inputs for t in tasks])
        y = np.concatenate([t.targets for t in tasks])
        xs = X.std(axis=0)
        ys = float(y.std())
        return cls(X.mean(axis=0), np.where(xs > 0, xs, 1.0), float(y.mean()), ys if ys > 0 else 1.0)

    def transform_inputs(self, X):
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_std

    def transform(self, task: TaskDataset) -> TaskDataset:
        return TaskDataset(self.transform_inputs(task.inputs),
                           (task.targets - self.y_mean) / self.y_std, task.task_id, task.meta)

    def to_dict(self) -> dict:
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["x_mean"], dtype=float), np.array(d["x_std"], dtype=float),
                   float(d["y_mean"]), float(d["y_std"]))


# ---------------------------------------------------------------------------
# sinusoids
# ---------------------------------------------------------------------------

def sinusoid_function(params: dict, x) -> np.ndarray:
    """``slope*x + amp*sin(1.5*(x - shift)) + offset``."""
    x = np.asarray(x, dtype=float)
    return params["slope"] * x + params["amp"] * np.sin(1.5 * (x - params["shift"])) + params["offset"]


def _sample_sinusoid_params(rng: RngStream) -> dict:
    return {"amp": float(rng.uniform(0.7, 1.3)), "shift": float(rng.normal(0.0, 0.1)),
            "offset": float(rng.normal(5.0, 0.1)), "slope": float(rng.normal(0.5, 0.2))}


def _sinusoid_samples(params, rng, size, noise):
    x = rng.uniform(-5.0, 5.0, size=(size, 1))
    y = sinusoid_function(params, x[:, 0]) + noise * rng.normal(size=size)
    return x, y


def gen_sinusoid_env(n: int, m: int, seed: int, n_test: int = 20, m_query: int = 100,
                     noise: float = 0.1) -> MetaDataset:
    """Sinusoid environment with affine trend.

    Each training task comes with a 100-point held-out query set from the
    same function (``train_queries``).
    """
    if n < 1 or m < 1:
        raise ValueError("n and m must be >= 1")
    root = RngStream(seed)
    train, train_q = [], []
    for i in range(n):
        r = root.fork(_TRAIN).fork(i)
        p = _sample_sinusoid_params(r)
        x, y = _sinusoid_samples(p, r, m, noise)
        xq, yq = _sinusoid_samples(p, r, m_query, noise)
        train.append(TaskDataset(x, y, i, p))
        train_q.append(TaskDataset(xq, yq, i, p))
    test = []
    for j in range(n_test):
        r = root.fork(_TEST).fork(j)
        p = _sample_sinusoid_params(r)
        x, y = _sinusoid_samples(p, r, m, noise)
        xq, yq = _sinusoid_samples(p, r, m_query, noise)
        tid = TEST_ID_OFFSET + j
        test.append((TaskDataset(x, y, tid, p), TaskDataset(xq, yq, tid, p)))
    env = {"name": "sinusoid", "n": n, "m": m, "n_test": n_test, "m_query": m_query, "noise": noise}
    return MetaDataset(train, test, env, seed, train_q)


# ---------------------------------------------------------------------------
# Cauchy mixture + GP
# ---------------------------------------------------------------------------

CAUCHY_MU1 = np.array([-1.0, -1.0])
CAUCHY_MU2 = np.array([2.0, 2.0])


def cauchy_mean(x) -> np.ndarray:
    """Mixture of two Cauchy bumps at (-1,-1) and (2,2) with weights 6 and 3."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d1 = np.sum((x - CAUCHY_MU1) ** 2, axis=1)
    d2 = np.sum((x - CAUCHY_MU2) ** 2, axis=1)
    return 6.0 / (np.pi * (1.0 + d1)) + 3.0 / (np.pi * (1.0 + d2))


def se_kernel(X1, X2, lengthscale: float = 0.2, variance: float = 1.0) -> np.ndarray:
    """``variance * exp(-||x - x'||^2 / (2 * lengthscale))``."""
    sq = np.sum((X1[:, None, :] - X2[None, :, :]) ** 2, axis=-1)
    return variance * np.exp(-sq / (2.0 * lengthscale))


def _cauchy_task(rng, size, noise, lengthscale, gp_variance):
    x = np.clip(rng.normal(0.0, 2.5, size=(size, 2)), -3.0, 2.0)
    f = cauchy_mean(x)
    if gp_variance > 0:
        K = se_kernel(x, x, lengthscale, gp_variance)
        L, _ = cholesky_jittered(K)
        f = f + L @ rng.normal(size=size)
    return x, f + noise * rng.normal(size=size)


def gen_cauchy_env(n: int, m: int, seed: int, n_test: int = 20, m_query: int = 100,
                   noise: float = 0.05, lengthscale: float = 0.2,
                   gp_variance: float = 1.0) -> MetaDataset:
    """Cauchy-mixture regression in 2-D plus a GP perturbation per task.

    The GP component is drawn exactly on all inputs of a task (context and
    query jointly) so both views see one function.
    """
    if n < 1 or m < 1:
        raise ValueError("n and m must be >= 1")
    root = RngStream(seed)
    train, train_q, test = [], [], []
    for i in range(n):
        x, y = _cauchy_task(root.fork(_TRAIN).fork(i), m + m_query, noise, lengthscale, gp_variance)
        train.append(TaskDataset(x[:m], y[:m], i))
        train_q.append(TaskDataset(x[m:], y[m:], i))
    for j in range(n_test):
        x, y = _cauchy_task(root.fork(_TEST).fork(j), m + m_query, noise, lengthscale, gp_variance)
        tid = TEST_ID_OFFSET + j
        test.append((TaskDataset(x[:m], y[:m], tid), TaskDataset(x[m:], y[m:], tid)))
    env = {"name": "cauchy", "n": n, "m": m, "n_test": n_test, "m_query": m_query, "noise": noise,
           "lengthscale": lengthscale, "gp_variance": gp_variance}
    return MetaDataset(train, test, env, seed, train_q)


# ---------------------------------------------------------------------------
# linear regression
# ---------------------------------------------------------------------------

def _blr_task(rng, m, d, mu_T, sigma_T, sigma_x, sigma_eps, task_id, m_query=0):
    w = mu_T + sigma_T * rng.normal(size=d)
    X = sigma_x * rng.normal(size=(m + m_query, d))
    y = X @ w + sigma_eps * rng.normal(size=m + m_query)
    meta = {"w_star": w}
    return TaskDataset(X[:m], y[:m], task_id, meta), TaskDataset(X[m:], y[m:], task_id, meta)


def gen_blr_env(n: int, m: int = 5, d: int = 5, seed: int = 0, mu_T=0.2, sigma_T: float = 0.1,
                sigma_x: float = 1.0, sigma_eps: float = 1.0 / 3.0, n_test: int = 20,
                m_query: int = 100) -> MetaDataset:
    """Linear-regression environment ``y = w*^T x + eps`` with ``w* ~ N(mu_T, sigma_T^2 I)``.

    ``mu_T`` may be a scalar (broadcast to all coordinates) or a vector.
    True weights are stored under ``meta["w_star"]``.
    """
    mu = np.broadcast_to(np.asarray(mu_T, dtype=float), (d,)).copy()
    root = RngStream(seed)
    train, test = [], []
    for i in range(n):
        s, _ = _blr_task(root.fork(_TRAIN).fork(i), m, d, mu, sigma_T, sigma_x, sigma_eps, i)
        train.append(s)
    for j in range(n_test):
        test.append(_blr_task(root.fork(_TEST).fork(j), m, d, mu, sigma_T, sigma_x, sigma_eps,
                              TEST_ID_OFFSET + j, m_query))
    env = {"name": "blr", "n": n, "m": m, "d": d, "mu_T": mu, "sigma_T": sigma_T,
           "sigma_x": sigma_x, "sigma_eps": sigma_eps}
    return MetaDataset(train, test, env, seed)


# ---------------------------------------------------------------------------
# logistic classification
# ---------------------------------------------------------------------------

def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def sample_logreg_task(rng: RngStream, m: int, w_star: np.ndarray, task_id: int = 0) -> TaskDataset:
    """Inputs uniform on ``[-1, 1]^d``, labels ``Bernoulli(sigmoid(w*^T x))``."""
    d = w_star.shape[0]
    X = rng.uniform(-1.0, 1.0, size=(m, d))
    y = (rng.uniform(size=m) < sigmoid(X @ w_star)).astype(float)
    return TaskDataset(X, y, task_id, {"w_star": np.asarray(w_star, dtype=float)})


def gen_logreg_env(n: int, m: int = 5, seed: int = 0, d: int = 2, mu_T: float = 10.0,
                   sigma_T: float = 3.0, n_test: int = 20, m_query: int = 100) -> MetaDataset:
    """Logistic classification environment with ``w* ~ N(mu_T 1, sigma_T^2 I)``."""
    root = RngStream(seed)
    train, test = [], []
    for i in range(n):
        r = root.fork(_TRAIN).fork(i)
        w = mu_T + sigma_T * r.normal(size=d)
        train.append(sample_logreg_task(r, m, w, i))
    for j in range(n_test):
        r = root.fork(_TEST).fork(j)
        w = mu_T + sigma_T * r.normal(size=d)
        tid = TEST_ID_OFFSET + j
        test.append((sample_logreg_task(r, m, w, tid), sample_logreg_task(r, m_query, w, tid)))
    env = {"name": "logreg", "n": n, "m": m, "d": d, "mu_T": mu_T, "sigma_T": sigma_T}
    return MetaDataset(train, test, env, seed)


# ---------------------------------------------------------------------------
# synthetic peptide pool
# ---------------------------------------------------------------------------

POOL_SIZE = 813
POOL_DIM = 45


def gen_peptide_pool(seed: int, n_meta_tasks: int = 5, meta_task_size: int = 200,
                     n_target_tasks: int = 2, n_factors: int = 6, task_spread: float = 0.35,
                     reward_noise: float = 0.05) -> tuple[BanditPool, list]:
    """Synthetic stand-in for the 813-arm, 45-feature peptide bandit.

    Features come from a shared low-rank latent factor model. The reward
    weights of each task are a shared mean vector plus a task-specific
    perturbation of relative size ``task_spread``, and rewards pass through a
    mild saturating nonlinearity so the response is not exactly linear.

    Returns:
        ``(pool, meta_train_tasks)`` where the meta-training tasks are
        evaluated on their own freshly drawn candidates.
    """
    root = RngStream(seed)
    r_model = root.fork(0)
    B = r_model.normal(size=(n_factors, POOL_DIM)) / np.sqrt(n_factors)
    w_mean = r_model.normal(size=POOL_DIM) / np.sqrt(POOL_DIM)

    def features(rng, size):
        Z = rng.normal(size=(size, n_factors))
        return Z @ B + 0.3 * rng.normal(size=(size, POOL_DIM))

    def task_weights(rng):
        return w_mean + task_spread * rng.normal(size=POOL_DIM) / np.sqrt(POOL_DIM)

    def reward(X, w, rng):
        z = X @ w
        return 2.0 * np.tanh(0.6 * z) + reward_noise * rng.normal(size=X.shape[0])

    pool_X = features(root.fork(_POOL), POOL_SIZE)
    meta_tasks = []
    for i in range(n_meta_tasks):
        r = root.fork(_TRAIN).fork(i)
        w = task_weights(r)
        X = features(r, meta_task_size)
        meta_tasks.append(TaskDataset(X, reward(X, w, r), i))
    rewards = []
    for j in range(n_target_tasks):
        r = root.fork(_TEST).fork(j)
        rewards.append(reward(pool_X, task_weights(r), r))
    return BanditPool(pool_X, np.array(rewards), seed), meta_tasks
