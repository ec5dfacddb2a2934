# src/ccrft/reward.py

import dataclasses
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from config import RewardWeights
from toyworld.scene import Clip, region_rect
from toyworld.tools import ToolCall
from utils.errors import ConfigError

# ---------------------------------------------------------------------------------
# ВАРИАНТЫ НАГРАДЫ ДЛЯ АБЛЯЦИЙ
# ---------------------------------------------------------------------------------

VARIANT_TERMS = {
    "answer_only": (False, False, False),
    "curiosity": (True, False, False),
    "coherence": (False, True, False),
    "both": (True, True, False),
    "both_penalty": (True, True, True),
}


def variant_weights(variant: str, base: RewardWeights) -> RewardWeights:
    """Обнуляет w2/w3/w4 по варианту; w1 (ответ) есть всегда."""
    if variant not in VARIANT_TERMS:
        raise ConfigError(f"неизвестный вариант {variant!r}", field="rft.variant")
    cur, coh, pen = VARIANT_TERMS[variant]
    return dataclasses.replace(
        base,
        w2=base.w2 if cur else 0.0,
        w3=base.w3 if coh else 0.0,
        w4=base.w4 if pen else 0.0,
    )


# ---------------------------------------------------------------------------------
# СОСТАВЛЯЮЩИЕ
# ---------------------------------------------------------------------------------

def penalty(n_invalid: int, length: int, weights: RewardWeights) -> float:
    """Pen = α_inv·#invalid + α_len·max(0, |τ| − L0)."""
    return weights.alpha_inv * n_invalid + weights.alpha_len * max(0, length - weights.l0)


def zscore(values: Sequence[float], eps: float = 1e-8) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return v
    std = v.std()
    if std == 0:
        return np.zeros_like(v)
    return (v - v.mean()) / (std + eps)


def batch_curiosity(step_curiosities: Sequence[np.ndarray], mode: str = "trajectory") -> np.ndarray:
    """
    R_cur по пачке траекторий.
    trajectory: суммы по траекториям, затем z-score по пачке.
    step: z-score всех шагов пачки, затем сумма по траектории.
    """
    if mode == "trajectory":
        return zscore([float(np.sum(c)) for c in step_curiosities])
    if mode == "step":
        lengths = [len(c) for c in step_curiosities]
        flat = zscore(np.concatenate([np.asarray(c, dtype=float) for c in step_curiosities])
                      if step_curiosities else [])
        out, pos = [], 0
        for n in lengths:
            out.append(float(flat[pos:pos + n].sum()))
            pos += n
        return np.asarray(out)
    raise ConfigError(f"допустимо trajectory|step, получено {mode!r}", field="rewards.curiosity_zscore")


def argument_vector(call: ToolCall, clip: Clip) -> np.ndarray:
    """Аргумент шага как точка (cx, cy, кадр) в [0,1]³."""
    if call.op == "TEMP":
        return np.array([0.5, 0.5, call.arg / max(clip.n_frames - 1, 1)])
    cx, cy = region_rect(call.arg, clip.height, clip.width).center()
    return np.array([cx / clip.width, cy / clip.height, 0.0])


def l2_smooth_prior(calls: Sequence[ToolCall], clip: Clip) -> float:
    """−Σ‖a_{t+1} − a_t‖² по векторам аргументов (альтернатива косинусной когерентности)."""
    if len(calls) < 2:
        return 0.0
    A = np.stack([argument_vector(c, clip) for c in calls])
    return float(-np.sum(np.diff(A, axis=0) ** 2))


# ---------------------------------------------------------------------------------
# НАГРАДА ТРАЕКТОРИИ
# ---------------------------------------------------------------------------------

@dataclass
class RewardBreakdown:
    final: float
    curiosity: float
    coherence: float
    penalty: float
    total: float


def reward_breakdown(correct: bool, n_invalid: int, length: int, cur: float, coh: float,
                     weights: RewardWeights) -> RewardBreakdown:
    final = 1.0 if correct else -1.0
    pen = penalty(n_invalid, length, weights)
    total = weights.w1 * final + weights.w2 * cur + weights.w3 * coh - weights.w4 * pen
    return RewardBreakdown(final, cur, coh, pen, total)


def trajectory_reward(traj, cur: float, coh: float, weights: RewardWeights) -> float:
    """R = w1·R_final + w2·R_cur + w3·R_coh − w4·Pen; cur уже z-нормирован по пачке."""
    return reward_breakdown(traj.correct, traj.n_invalid, traj.length, cur, coh, weights).total


def breakdowns_summary(items: List[RewardBreakdown]) -> dict:
    if not items:
        return {}
    return {
        name: float(np.mean([getattr(b, name) for b in items]))
        for name in ("final", "curiosity", "coherence", "penalty", "total")
    }
