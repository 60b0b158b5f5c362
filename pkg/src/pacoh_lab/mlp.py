"""Fully connected tanh networks with hand-written forward and backward passes.

Parameters live in a single flat vector with a layer-major layout: for each
layer the weight matrix (``fan_out x fan_in``, row-major) followed by its bias.
Every function accepts either one parameter vector of shape ``(P,)`` or a
stack of them, ``(L, P)``, in which case the leading axis indexes networks
(BNN particles) and outputs gain the same leading axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import DimensionMismatch, RngStream


@dataclass(frozen=True)
class MlpArchitecture:
    """Layer widths of a tanh MLP with identity output.

    Example:
        >>> MlpArchitecture(1, (4,), 1).n_params
        13
    """

    input_dim: int
    hidden_layers: tuple = (32, 32, 32, 32)
    output_dim: int = 1
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        widths = (self.input_dim, *self.hidden_layers, self.output_dim)
        if any(w < 1 for w in widths):
            raise ValueError(f"all layer widths must be >= 1, got {widths}")
        if self.output_activation != "identity":
            raise ValueError("only the identity output activation is supported")

    @property
    def widths(self) -> tuple:
        return (self.input_dim, *self.hidden_layers, self.output_dim)

    @property
    def n_params(self) -> int:
        w = self.widths
        return sum((w[i] + 1) * w[i + 1] for i in range(len(w) - 1))

    def layer_offsets(self) -> list[tuple[int, int, int, int]]:
        """Per layer ``(w_start, b_start, fan_in, fan_out)`` in the flat layout."""
        out, pos = [], 0
        w = self.widths
        for i in range(len(w) - 1):
            fan_in, fan_out = w[i], w[i + 1]
            out.append((pos, pos + fan_in * fan_out, fan_in, fan_out))
            pos += (fan_in + 1) * fan_out
        return out

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_layers": list(self.hidden_layers),
                "output_dim": self.output_dim, "output_activation": self.output_activation}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpArchitecture":
        return cls(int(d["input_dim"]), tuple(d["hidden_layers"]), int(d["output_dim"]),
                   d.get("output_activation", "identity"))


def unpack(arch: MlpArchitecture, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split flat parameters into ``(W, b)`` views per layer.

    For stacked parameters of shape ``(L, P)`` the views are ``(L, out, in)``
    and ``(L, out)``.
    """
    params = np.asarray(params, dtype=float)
    if params.shape[-1] != arch.n_params:
        raise DimensionMismatch(
            f"expected {arch.n_params} parameters, got {params.shape[-1]}")
    lead = params.shape[:-1]
    layers = []
    for w0, b0, fan_in, fan_out in arch.layer_offsets():
        W = params[..., w0:b0].reshape(*lead, fan_out, fan_in)
        b = params[..., b0:b0 + fan_out]
        layers.append((W, b))
    return layers


def pack(arch: MlpArchitecture, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Inverse of :func:`unpack` for a single network."""
    parts = []
    for (W, b), (_, _, fan_in, fan_out) in zip(layers, arch.layer_offsets()):
        W = np.asarray(W, dtype=float)
        b = np.asarray(b, dtype=float)
        if W.shape != (fan_out, fan_in) or b.shape != (fan_out,):
            raise DimensionMismatch("layer shapes do not match the architecture")
        parts.extend([W.ravel(), b])
    flat = np.concatenate(parts)
    if flat.size != arch.n_params:
        raise DimensionMismatch("wrong number of layers")
    return flat


def init_params(arch: MlpArchitecture, rng: RngStream, size: int | None = None) -> np.ndarray:
    """Fan-in scaled Gaussian initialisation (std ``1/sqrt(fan_in)``), zero biases."""
    n = 1 if size is None else size
    out = np.zeros((n, arch.n_params))
    for w0, b0, fan_in, fan_out in arch.layer_offsets():
        out[:, w0:b0] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(n, b0 - w0))
    return out[0] if size is None else out


def fan_in_std(arch: MlpArchitecture) -> np.ndarray:
    """Per-coordinate ``1/sqrt(fan_in)`` scale in the flat layout (biases included)."""
    out = np.empty(arch.n_params)
    for w0, b0, fan_in, fan_out in arch.layer_offsets():
        out[w0:b0 + fan_out] = 1.0 / np.sqrt(fan_in)
    return out


def _prepare(arch, params, x):
    params = np.asarray(params, dtype=float)
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(params)):
        raise ValueError("non-finite network parameters")
    single_params = params.ndim == 1
    single_x = x.ndim == 1
    if x.shape[-1] != arch.input_dim:
        raise DimensionMismatch(f"input dim {x.shape[-1]} != {arch.input_dim}")
    P = params[None, :] if single_params else params
    X = x[None, :] if single_x else x
    return P, X, single_params, single_x


def forward_with_cache(arch: MlpArchitecture, params: np.ndarray, X: np.ndarray):
    """Forward pass for stacked params ``(L, P)`` on inputs ``(m, d)`` or ``(L, m, d)``.

    Returns:
        Output of shape ``(L, m, output_dim)`` and the list of layer inputs
        needed by :func:`backward_from_cache`.
    """
    layers = unpack(arch, params)
    acts = [X]
    a = X
    n_layers = len(layers)
    for i, (W, b) in enumerate(layers):
        z = np.matmul(a, np.swapaxes(W, -1, -2)) + b[:, None, :]
        if i < n_layers - 1:
            a = np.tanh(z)
            acts.append(a)
        else:
            a = z
    return a, (layers, acts)


def backward_from_cache(arch: MlpArchitecture, cache, upstream: np.ndarray,
                        need_input_grad: bool = False):
    """Reverse pass; ``upstream`` has the output's shape ``(L, m, out)``.

    Gradients are summed over the ``m`` data points, giving ``(L, P)``.
    """
    layers, acts = cache
    L = upstream.shape[0]
    grad = np.empty((L, arch.n_params))
    delta = upstream
    offsets = arch.layer_offsets()
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a_prev = acts[i]
        w0, b0, fan_in, fan_out = offsets[i]
        gW = np.matmul(np.swapaxes(delta, -1, -2), a_prev)
        grad[:, w0:b0] = gW.reshape(L, -1)
        grad[:, b0:b0 + fan_out] = delta.sum(axis=1)
        if i > 0 or need_input_grad:
            back = np.matmul(delta, W)
            delta = back * (1.0 - a_prev * a_prev) if i > 0 else back
    grad_x = delta if need_input_grad else None
    return grad, grad_x


def mlp_forward(arch: MlpArchitecture, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate the network(s).

    Args:
        arch: architecture.
        params: ``(P,)`` or ``(L, P)``.
        x: a single input ``(d,)`` or a batch ``(m, d)``.

    Returns:
        Output with the leading axes of ``params`` and ``x`` kept, i.e.
        ``(out,)``, ``(m, out)``, ``(L, out)`` or ``(L, m, out)``.
    """
    P, X, sp, sx = _prepare(arch, params, x)
    out, _ = forward_with_cache(arch, P, X)
    if sx:
        out = out[:, 0, :]
    return out[0] if sp else out


def mlp_backward(arch: MlpArchitecture, params: np.ndarray, x: np.ndarray,
                 upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``sum(upstream * mlp_forward(arch, params, x))``.

    Returns:
        ``(grad_params, grad_x)``; ``grad_params`` matches ``params`` in shape
        (summed over data points) and ``grad_x`` matches the broadcast input.
    """
    P, X, sp, sx = _prepare(arch, params, x)
    out, cache = forward_with_cache(arch, P, X)
    up = np.asarray(upstream, dtype=float)
    if sx:
        up = up[..., None, :]
    if sp:
        up = up[None]
    up = np.broadcast_to(up, out.shape)
    g, gx = backward_from_cache(arch, cache, up, need_input_grad=True)
    if sx:
        gx = gx[:, 0, :]
    if sp:
        return g[0], gx[0]
    return g, gx
