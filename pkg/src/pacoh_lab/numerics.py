"""Dense linear algebra, log-space arithmetic, seeded random streams and
Gaussian density helpers shared by the rest of the package.

All reals are float64. Randomness is routed through :class:`RngStream`, a
thin wrapper around numpy's counter-based Philox generator whose streams are
identified by a ``(seed, path)`` pair so that forks are order independent.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from scipy import linalg as sla
from scipy import special

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

JITTER_SCALE = 1e-6
JITTER_ESCALATIONS = 3


class NumericalError(RuntimeError):
    """Base class for numerical failures (CLI maps these to exit code 3)."""


class NotPositiveDefinite(NumericalError):
    """Raised when a Cholesky factorisation fails even after jittering."""


class DivergenceDetected(NumericalError):
    """Raised when an iterative procedure produces non-finite values."""


class DimensionMismatch(ValueError):
    """Raised when array shapes are incompatible."""


class EmptyInput(ValueError):
    """Raised when a reduction receives no elements."""


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def cholesky_jittered(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A`` with escalating diagonal jitter.

    The first attempt uses ``A`` as given. On failure a jitter of
    ``1e-6 * mean(diag(A))`` is added and multiplied by ten on each of up to
    three further attempts.

    Returns:
        (L, jitter) where ``L @ L.T == A + jitter * I``.

    Raises:
        NotPositiveDefinite: if every attempt fails.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    try:
        return np.linalg.cholesky(A), 0.0
    except np.linalg.LinAlgError:
        pass
    base = JITTER_SCALE * max(float(np.mean(np.diag(A))), np.finfo(float).tiny)
    eye = np.eye(A.shape[0])
    for k in range(JITTER_ESCALATIONS + 1):
        jitter = base * 10.0**k
        try:
            L = np.linalg.cholesky(A + jitter * eye)
            logger.debug("cholesky succeeded with jitter %.3e", jitter)
            return L, jitter
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefinite(
        f"Cholesky failed after {JITTER_ESCALATIONS} jitter escalations")


def cholesky_logdet_solve(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, float]:
    """Solve ``A X = B`` for SPD ``A`` and return ``log|A|`` alongside.

    Args:
        A: symmetric positive definite ``(n, n)`` matrix.
        B: right-hand side of shape ``(n,)`` or ``(n, k)``.

    Returns:
        Tuple ``(X, logdet)``; ``X`` has the shape of ``B``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if B.shape[0] != A.shape[0]:
        raise DimensionMismatch(f"A is {A.shape} but B has {B.shape[0]} rows")
    L, _ = cholesky_jittered(A)
    X = sla.cho_solve((L, True), B)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return X, logdet


# ---------------------------------------------------------------------------
# log-space arithmetic
# ---------------------------------------------------------------------------

def logsumexp(v, axis=None):
    """Overflow-safe ``log(sum(exp(v)))``; ``-inf`` entries are allowed.

    Thin wrapper around :func:`scipy.special.logsumexp` that rejects empty
    input instead of silently returning ``-inf``.
    """
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise EmptyInput("logsumexp of an empty array")
    out = special.logsumexp(v, axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def log_mean_exp(v, axis=None):
    """``log(mean(exp(v)))`` along ``axis``."""
    v = np.asarray(v, dtype=float)
    n = v.size if axis is None else v.shape[axis]
    return logsumexp(v, axis=axis) - np.log(n)


def softmax(v, axis=-1):
    """Numerically stable softmax."""
    return special.softmax(np.asarray(v, dtype=float), axis=axis)


# ---------------------------------------------------------------------------
# Gaussians
# ---------------------------------------------------------------------------

@dataclass
class DiagonalGaussian:
    """Gaussian with diagonal covariance parameterised by ``log_std``.

    Used both for the hyper-prior over prior parameters and for BNN weight
    priors.
    """

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.log_std = np.atleast_1d(np.asarray(self.log_std, dtype=float))
        if self.log_std.shape == (1,) and self.mean.shape[0] > 1:
            self.log_std = np.full_like(self.mean, self.log_std[0])
        if self.mean.shape != self.log_std.shape:
            raise DimensionMismatch(
                f"mean {self.mean.shape} and log_std {self.log_std.shape} differ")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.log_std))):
            raise ValueError("DiagonalGaussian parameters must be finite")

    @classmethod
    def isotropic(cls, mean, std: float, dim: int | None = None) -> "DiagonalGaussian":
        mean = np.asarray(mean, dtype=float)
        if mean.ndim == 0:
            if dim is None:
                raise ValueError("dim is required for a scalar mean")
            mean = np.full(dim, float(mean))
        return cls(mean, np.full(mean.shape, np.log(std)))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def logpdf(self, x: np.ndarray) -> float:
        return gaussian_logpdf(x, self)

    def grad_logpdf(self, x: np.ndarray) -> np.ndarray:
        """Gradient of :meth:`logpdf` with respect to ``x``."""
        x = np.asarray(x, dtype=float)
        return -(x - self.mean) / self.std**2

    def sample(self, rng: "RngStream", size: int | None = None) -> np.ndarray:
        shape = (self.dim,) if size is None else (size, self.dim)
        return self.mean + self.std * rng.normal(size=shape)


def gaussian_logpdf(x, g: DiagonalGaussian) -> float:
    """Log density of a diagonal Gaussian; ``x`` may be ``(d,)`` or ``(k, d)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != g.dim:
        raise DimensionMismatch(f"x has dim {x.shape[-1]}, Gaussian has {g.dim}")
    z = (x - g.mean) * np.exp(-g.log_std)
    out = -0.5 * np.sum(z * z, axis=-1) - np.sum(g.log_std) - 0.5 * g.dim * LOG_2PI
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


class RngStream:
    """Counter-based random stream identified by ``(seed, path)``.

    ``path`` is the tuple of fork labels leading to this stream; the root
    stream created from ``RngStream(seed, stream_id)`` has ``path ==
    (stream_id,)``. Children are derived from the parent's identity, never from
    its consumed state, so ``fork`` does not perturb the parent.

    Example:
        >>> s = RngStream(0)
        >>> a = s.fork(3).uniform(size=2)
        >>> b = s.fork(3).uniform(size=2)
        >>> bool(np.all(a == b))
        True
    """

    def __init__(self, seed: int, stream_id: int = 0, *, _path: Sequence[int] | None = None):
        self.seed = int(seed) & _MASK64
        self.path = tuple(int(p) & _MASK64 for p in (_path if _path is not None else (stream_id,)))
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    @property
    def stream_id(self) -> int:
        return self.path[0]

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def fork(self, label: int) -> "RngStream":
        return RngStream(self.seed, _path=self.path + (int(label),))

    # thin pass-throughs to numpy.random.Generator
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self._gen.permutation(x)

    def binomial(self, n, p, size=None):
        return self._gen.binomial(n, p, size)

    # serialisation
    def get_state(self) -> dict[str, Any]:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "path": list(self.path),
            "counter": [int(c) for c in st["state"]["counter"]],
            "key": [int(k) for k in st["state"]["key"]],
            "buffer": [int(b) for b in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict[str, Any]) -> "RngStream":
        out = cls(state["seed"], _path=state["path"])
        bg = out._gen.bit_generator
        bg.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }
        return out

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"


def rng_fork(parent: RngStream, label: int) -> RngStream:
    """Functional alias for :meth:`RngStream.fork`."""
    return parent.fork(label)


def as_stream(rng: RngStream | int | None) -> RngStream:
    """Coerce an int seed (or ``None`` meaning seed 0) into an RngStream."""
    if isinstance(rng, RngStream):
        return rng
    return RngStream(0 if rng is None else int(rng))
