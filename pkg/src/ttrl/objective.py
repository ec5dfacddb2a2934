# src/ttrl/objective.py

from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from ccrft.grpo import grpo_objective
from config import RcprConfig
from metrics.fidelity import sim_behav
from policy.model import PolicyGrad, PolicyParams, Trajectory

NEUTRAL_VALUE = 1.0


# ---------------------------------------------------------------------------------
# ШТРАФ И НАГРАДА
# ---------------------------------------------------------------------------------

def pen(traj: Trajectory, alpha_inv: float, alpha_len: float, l0: int) -> float:
    """Pen(τ) = α_inv·#невалидных + α_len·max(0, |τ| − L0); |τ| — число decisive шагов."""
    return alpha_inv * traj.n_invalid + alpha_len * max(0, traj.n_decisive - l0)


def ttrl_reward(traj: Trajectory, consensus: int, exemplar: Optional[Trajectory],
                kappa: float, lambda_pen: float, rcpr: RcprConfig) -> float:
    """r(τ; τ*, â) = 1{ans = â} + κ·Sim_behav(τ, τ*) − λ_pen·Pen(τ)."""
    r = 1.0 if traj.answer == consensus else 0.0
    if kappa > 0 and exemplar is not None:
        r += kappa * sim_behav(traj, exemplar, rcpr)
    if lambda_pen > 0:
        r -= lambda_pen * pen(traj, rcpr.alpha_inv, rcpr.alpha_len, rcpr.l0)
    return float(r)


# ---------------------------------------------------------------------------------
# ПРЕИМУЩЕСТВО
# ---------------------------------------------------------------------------------

def advantages(rewards: Sequence[float], v_bar: float, baseline: float, objective: str = "advantage") -> np.ndarray:
    """
    advantage: A = v̄·(r − b); value_weighted: A = v̄·r.
    v̄ и b приходят числами: градиент через них не идёт.
    """
    r = np.asarray(rewards, dtype=float)
    if objective == "advantage":
        return float(v_bar) * (r - float(baseline))
    if objective == "value_weighted":
        return float(v_bar) * r
    raise ValueError(f"TTRL: неизвестная цель {objective!r}")


def ttrl_objective(params: PolicyParams, reference: PolicyParams, trajs: Sequence[Trajectory],
                   adv: np.ndarray, mask: float, beta: float) -> Tuple[float, PolicyGrad]:
    """
    loss = −m(q)·mean_j A_j·log π(τ_j) + β·KL_step(π ‖ π_EMA).
    При m(q) = 0 остаётся только KL-притяжение к EMA.
    """
    return grpo_objective(params, reference, trajs, float(mask) * np.asarray(adv, dtype=float), beta)


# ---------------------------------------------------------------------------------
# ЦЕННОСТИ ОКРЕСТНОСТИ
# ---------------------------------------------------------------------------------

def value_summary(cur_coh: float) -> float:
    """2·σ(Cur + Coh): нейтральная сводка 0 даёт 1.0."""
    return float(2.0 * expit(cur_coh))


def neighborhood_value_update(values: Dict[str, float], neighbor_ids: Sequence[str],
                              summary: float, decay: float) -> Dict[str, float]:
    """v(h) ← decay·v(h) + (1 − decay)·s для соседей; decay = 1 замораживает значения."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"TTRL: decay вне [0,1]: {decay}")
    out = dict(values)
    for h in neighbor_ids:
        out[h] = decay * out.get(h, NEUTRAL_VALUE) + (1.0 - decay) * summary
    return out


def mean_value(values: Dict[str, float], neighbor_ids: Sequence[str]) -> float:
    """v̄(N(q)); пустая окрестность → нейтральное 1.0."""
    if not neighbor_ids:
        return NEUTRAL_VALUE
    return float(np.mean([values.get(h, NEUTRAL_VALUE) for h in neighbor_ids]))


def baseline_update(baseline: float, v_bar: float, decay: float) -> float:
    return decay * baseline + (1.0 - decay) * v_bar
