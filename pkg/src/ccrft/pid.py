# src/ccrft/pid.py

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from config import PidConfig
from policy.model import PolicyParams, step_kl


@dataclass(frozen=True)
class PidState:
    """Клиппированный PID на β с анти-windup, прогревом без D-члена и ограниченным множителем."""
    beta: float = 1.0
    kp: float = 0.30
    ki: float = 0.05
    kd: float = 0.10
    i_max: float = 5.0
    beta_min: float = 1e-3
    beta_max: float = 1e2
    ema_tau: float = 0.9
    warmup: int = 100
    max_ratio: float = 2.0
    trust_scale: float = 4.0
    integral: float = 0.0
    prev_error: float = 0.0
    kl_ema: Optional[float] = None
    calls: int = 0

    @staticmethod
    def from_config(cfg: PidConfig, beta: float) -> "PidState":
        return PidState(
            beta=float(np.clip(beta, cfg.beta_min, cfg.beta_max)),
            kp=cfg.kp, ki=cfg.ki, kd=cfg.kd, i_max=cfg.i_max,
            beta_min=cfg.beta_min, beta_max=cfg.beta_max,
            ema_tau=cfg.ema_tau, warmup=cfg.warmup,
            max_ratio=cfg.max_ratio, trust_scale=cfg.trust_scale,
        )

    def saturated(self, scale: float) -> bool:
        """Шаг упёрся в предел растяжения: KL ниже цели не из-за β, PID этот замер пропускает."""
        return self.trust_scale > 0 and scale >= self.trust_scale


def pid_step(pid: PidState, kl_measured: float, kl_target: float) -> Tuple[PidState, float]:
    """
    e = (EMA(kl) − tgt)/tgt, I ← clip(I + e, ±I_max),
    β ← clip(β·r, β_min, β_max), r = clip(1 + Kp·e + Ki·I + Kd·Δe, 1/max_ratio, max_ratio).
    Первые warmup вызовов Kd = 0. Отрицательный множитель даёт r = 1/max_ratio, а не скачок на β_min.
    """
    if kl_target <= 0:
        raise ValueError(f"PID: kl_target должен быть > 0, получено {kl_target}")
    ema = kl_measured if pid.kl_ema is None else pid.ema_tau * pid.kl_ema + (1.0 - pid.ema_tau) * kl_measured
    e = (ema - kl_target) / kl_target
    integral = float(np.clip(pid.integral + e, -pid.i_max, pid.i_max))
    kd = 0.0 if pid.calls < pid.warmup else pid.kd
    mult = 1.0 + pid.kp * e + pid.ki * integral + kd * (e - pid.prev_error)
    ratio = float(np.clip(mult, 1.0 / pid.max_ratio, pid.max_ratio))
    beta = float(np.clip(pid.beta * ratio, pid.beta_min, pid.beta_max))
    new = dataclasses.replace(pid, beta=beta, integral=integral, prev_error=e, kl_ema=ema, calls=pid.calls + 1)
    return new, beta


# ---------------------------------------------------------------------------------
# ШАГ ПОД ЦЕЛЕВОЙ KL
# ---------------------------------------------------------------------------------

def interpolate(ref: PolicyParams, live: PolicyParams, lam: float) -> PolicyParams:
    """ref + λ·(live − ref); логиты линейны по весам, значит и по λ."""
    return PolicyParams(
        ref.w_act + lam * (live.w_act - ref.w_act),
        ref.w_ans + lam * (live.w_ans - ref.w_ans),
        live.answer_index,
        live.temperature,
    )


def kl_trust_step(candidate: PolicyParams, ref: PolicyParams, states: np.ndarray,
                  answer_states: Optional[np.ndarray], kl_target: float,
                  max_scale: float = 4.0) -> Tuple[PolicyParams, float]:
    """
    Масштабирует отклонение кандидата от ref так, чтобы KL_step(π ‖ ref) = kl_target.
    KL(ref + λΔ ‖ ref) не убывает по λ, поэтому корень ищется на [0, max_scale] по brentq.
    Если и при max_scale KL ниже цели, берётся max_scale: за шаг KL растёт не больше чем в max_scale² раз.
    Возвращает (политика, λ).
    """
    if kl_target <= 0:
        raise ValueError(f"KL-шаг: kl_target должен быть > 0, получено {kl_target}")

    def gap(lam: float) -> float:
        return step_kl(interpolate(ref, candidate, lam), ref, states, answer_states) - kl_target

    if gap(1.0) <= 0:
        if gap(max_scale) <= 0:
            return interpolate(ref, candidate, max_scale), float(max_scale)
        lo, hi = 1.0, max_scale
    else:
        lo, hi = 0.0, 1.0
    lam = float(brentq(gap, lo, hi, xtol=1e-9, rtol=1e-9))
    return interpolate(ref, candidate, lam), lam


def corridor_fraction(kl_series: Sequence[float], lo: float, hi: float, burn_in: int = 0) -> float:
    """Доля шагов после burn_in, на которых KL лежит в коридоре [lo, hi]."""
    tail = np.asarray(kl_series[burn_in:], dtype=float)
    if tail.size == 0:
        return 0.0
    return float(np.mean((tail >= lo) & (tail <= hi)))


def settle_step(kl_series: Sequence[float], lo: float, hi: float) -> Optional[int]:
    """Первый шаг, с которого KL входит в [lo, hi]; None, если не входит никогда."""
    kl = np.asarray(kl_series, dtype=float)
    inside = np.flatnonzero((kl >= lo) & (kl <= hi))
    return int(inside[0]) if inside.size else None
