"""Classification error, ramp loss and the ramp-loss generalization bound."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CSV_COLUMNS = (
    "m",
    "rho",
    "train_error",
    "test_error",
    "train_loss",
    "test_loss",
    "gen_gap",
    "rho_over_sqrt_m",
)


@dataclass(frozen=True)
class EvalResult:
    error: float
    ramp_mean: float
    loss_mean: float
    m: int


def classification_error(predictions, labels) -> float:
    """Fraction of samples with sign(f) != y.  A zero prediction is an error."""
    f = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if f.shape != y.shape:
        raise ValueError(f"{f.size} predictions vs {y.size} labels")
    if f.size == 0:
        raise ValueError("classification error of an empty set is undefined")
    return float(np.mean(np.sign(f) != y))


def ramp_loss(y, f):
    """1 for yf <= 0, 1 - yf on [0, 1], 0 for yf >= 1 (elementwise)."""
    return np.clip(1.0 - np.asarray(y, dtype=np.float64) * np.asarray(f, dtype=np.float64), 0.0, 1.0)


def ramp_gen_bound(rademacher_value: float, m: int, delta: float) -> float:
    """2 R + 3 sqrt(log(2/delta) / (2m))."""
    if m < 1:
        raise ValueError("m must be at least 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    return 2.0 * rademacher_value + 3.0 * math.sqrt(math.log(2.0 / delta) / (2.0 * m))


def generalization_gap(train: EvalResult, test: EvalResult) -> float:
    return abs(test.error - train.error)


def evaluate(scalar_outputs, labels, loss_mean: float = float("nan")) -> EvalResult:
    f = np.asarray(scalar_outputs, dtype=np.float64).ravel()
    return EvalResult(
        error=classification_error(f, labels),
        ramp_mean=float(np.mean(ramp_loss(labels, f))),
        loss_mean=float(loss_mean),
        m=int(f.size),
    )
