# src/metrics/selective.py

from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np
from scipy.stats import bootstrap

from utils.seeding import make_rng


@dataclass
class Decision:
    """Решение по одному вопросу: запас консенсуса, одноэлементное конформное множество, верность ответа."""
    margin: float
    singleton: bool
    correct: bool

    def answered(self, delta: float) -> bool:
        return self.singleton and self.margin >= delta


@dataclass
class CurvePoint:
    delta: float
    coverage: float
    err_sel: float
    gap: bool = False


def risk_coverage(decisions: Sequence[Decision], deltas: Sequence[float]) -> List[CurvePoint]:
    """
    Coverage — доля отвеченных при пороге δ, Err@Sel — ошибка на отвеченных.
    Ни одного ответа → точка-разрыв с err_sel = NaN.
    """
    if not decisions:
        raise ValueError("risk_coverage: нет решений")
    correct = np.array([d.correct for d in decisions], dtype=bool)
    points = []
    for delta in deltas:
        mask = np.array([d.answered(delta) for d in decisions], dtype=bool)
        n = int(mask.sum())
        if n == 0:
            points.append(CurvePoint(float(delta), 0.0, float("nan"), gap=True))
            continue
        points.append(CurvePoint(float(delta), n / len(decisions), float(1.0 - correct[mask].mean())))
    return points


def bootstrap_ci(
    samples: Sequence[float],
    statistic: Callable[..., float] = np.mean,
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> Tuple[float, float]:
    """
    Процентильный бутстрап-интервал; детерминирован при заданном seed.
    statistic принимает axis (np.mean, np.median и т.п.).
    """
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise ValueError("bootstrap_ci: пустая выборка")
    if n_resamples < 100:
        raise ValueError(f"bootstrap_ci: нужно B ≥ 100, получено {n_resamples}")
    if np.all(x == x[0]):
        value = float(statistic(x))
        return value, value
    res = bootstrap(
        (x,),
        lambda s, axis: statistic(s, axis=axis),
        n_resamples=n_resamples,
        confidence_level=level,
        method="percentile",
        vectorized=True,
        random_state=make_rng(seed, "bootstrap"),
    )
    return float(res.confidence_interval.low), float(res.confidence_interval.high)
