"""Prediction and decision metrics: RMSE, regression calibration error,
expected calibration error and bandit regret curves."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LengthMismatch(ValueError):
    """Raised when paired arrays differ in length."""


@dataclass(frozen=True)
class CalibrationConfig:
    """Number of confidence levels (regression) or bins (classification)."""

    H: int = 20

    def __post_init__(self):
        if self.H < 2:
            raise ValueError("H must be >= 2")


def rmse(pred, target) -> float:
    """Root mean squared error."""
    pred = np.asarray(pred, dtype=float).ravel()
    target = np.asarray(target, dtype=float).ravel()
    if pred.shape != target.shape:
        raise LengthMismatch(f"{pred.shape[0]} predictions vs {target.shape[0]} targets")
    if pred.size == 0:
        raise LengthMismatch("rmse of empty arrays")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def regression_calibration_error(cdf_values, cfg: CalibrationConfig = CalibrationConfig()) -> float:
    """Mean absolute gap between confidence levels and empirical coverage.

    Args:
        cdf_values: predictive CDF evaluated at each test target,
            ``F(y_j | x_j)``. Obtain these from any predictive object's
            ``cdf`` method.
        cfg: number of confidence levels ``H``; levels are ``q_h = h / H``.

    Returns:
        ``(1/H) * sum_h |qhat_h - q_h|`` where ``qhat_h`` is the fraction of
        test points with ``F(y_j | x_j) <= q_h``.
    """
    u = np.asarray(cdf_values, dtype=float).ravel()
    if u.size == 0:
        raise LengthMismatch("no test points")
    q = np.arange(1, cfg.H + 1) / cfg.H
    qhat = np.mean(u[None, :] <= q[:, None], axis=1)
    return float(np.mean(np.abs(qhat - q)))


def ece(confidences, predicted, labels, cfg: CalibrationConfig = CalibrationConfig()) -> float:
    """Expected calibration error with bins ``((h-1)/H, h/H]``."""
    conf = np.asarray(confidences, dtype=float).ravel()
    pred = np.asarray(predicted).ravel()
    lab = np.asarray(labels).ravel()
    if not (conf.shape == pred.shape == lab.shape):
        raise LengthMismatch("confidences, predictions and labels must align")
    if np.any(conf <= 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in (0, 1]")
    bins = np.clip(np.ceil(conf * cfg.H).astype(int) - 1, 0, cfg.H - 1)
    correct = (pred == lab).astype(float)
    total = 0.0
    for h in range(cfg.H):
        mask = bins == h
        if mask.any():
            total += mask.sum() * abs(correct[mask].mean() - conf[mask].mean())
    return float(total / conf.size)


def regret_curves(rewards, r_star: float) -> tuple[np.ndarray, np.ndarray]:
    """Average and simple regret after each round ``t = 1..T``.

    ``avg_t = mean(r* - r_1, ..., r* - r_t)`` and ``simple_t = r* - max(r_1..r_t)``.
    """
    r = np.asarray(rewards, dtype=float).ravel()
    if r.size == 0:
        raise ValueError("need at least one round")
    t = np.arange(1, r.size + 1)
    avg = np.cumsum(r_star - r) / t
    simple = r_star - np.maximum.accumulate(r)
    return avg, simple
