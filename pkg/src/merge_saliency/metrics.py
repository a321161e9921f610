"""Prediction-quality metrics: RMSE and the skill score against the mean predictor."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation, DataError, RejectionError


class UndefinedScoreError(DataError):
    """Skill score is undefined when the truth series is constant."""


@dataclass(frozen=True)
class DemoMetrics:
    demo_id: int
    eps_mse: float
    eps_rmse: float
    eps_mse_ref: float
    beta_mse: float | None  # None when the truth was constant (score undefined)


def _check(predictions, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape or p.ndim != 1 or p.shape[0] == 0:
        raise ContractViolation(f"series mismatch: predictions {p.shape}, truth {t.shape}")
    return p, t


def rmse(predictions: Sequence[float], truth: Sequence[float]) -> tuple[float, float]:
    """(mean squared error, its square root) over one demonstration."""
    p, t = _check(predictions, truth)
    eps_mse = float(np.mean((p - t) ** 2))
    return eps_mse, math.sqrt(eps_mse)


def eval_score(predictions: Sequence[float], truth: Sequence[float]) -> float:
    """Skill score 1 - mse/mse_ref, where mse_ref is the truth-mean predictor's MSE.

    1 means perfect, 0 matches the constant-mean predictor, negative is worse
    than it. Raises UndefinedScoreError when the truth is constant (ref = 0).
    """
    p, t = _check(predictions, truth)
    eps_ref = float(np.mean((t.mean() - t) ** 2))
    if eps_ref == 0.0:
        raise UndefinedScoreError("constant truth series: reference MSE is zero")
    eps_mse = float(np.mean((p - t) ** 2))
    return (eps_mse - eps_ref) / (0.0 - eps_ref)


def demo_metrics(demo_id: int, predictions, truth) -> DemoMetrics:
    """All per-demo metrics; a constant-truth demo gets beta_mse = None."""
    p, t = _check(predictions, truth)
    eps_mse, eps_rmse = rmse(p, t)
    eps_ref = float(np.mean((t.mean() - t) ** 2))
    beta = 1.0 - eps_mse / eps_ref if eps_ref > 0.0 else None
    return DemoMetrics(demo_id=demo_id, eps_mse=eps_mse, eps_rmse=eps_rmse,
                       eps_mse_ref=eps_ref, beta_mse=beta)


def aggregate(items: Sequence[DemoMetrics]) -> tuple[float, float, int]:
    """(mean beta, mean rmse, excluded count) over demos with a defined score."""
    valid = [m for m in items if m.beta_mse is not None]
    n_excluded = len(items) - len(valid)
    if not valid:
        raise RejectionError("no demonstration has a defined evaluation score")
    beta_bar = float(np.mean([m.beta_mse for m in valid]))
    rmse_bar = float(np.mean([m.eps_rmse for m in valid]))
    return beta_bar, rmse_bar, n_excluded
