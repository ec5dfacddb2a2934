# src/metrics/fidelity.py

import dataclasses
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from config import RcprConfig
from policy.model import Trajectory, TrajStep
from toyworld.tools import Observation
from toyworld.verify import anls, levenshtein, payload_fidelity
from utils.logger import get_logger

logger = get_logger("pixelsoul-metrics")


# ---------------------------------------------------------------------------------
# VisFid
# ---------------------------------------------------------------------------------

def decisive_observations(traj: Trajectory) -> List[Observation]:
    return [s.obs for s in traj.steps if s.decisive and s.obs is not None]


def pseudo_references(trajs: Sequence[Trajectory], exclude: Optional[int] = None,
                      answer: Optional[int] = None) -> List[Observation]:
    """
    Решающие успешные наблюдения других успешных траекторий.
    answer задан → «успешная» значит согласная с этим ответом (без разметки).
    """
    pool: List[Observation] = []
    for i, t in enumerate(trajs):
        agrees = t.correct if answer is None else t.answer == answer
        if i == exclude or not agrees:
            continue
        pool.extend(o for o in decisive_observations(t) if o.success)
    return pool


def visfid_observations(steps: Sequence[Observation], references: Sequence[Observation]) -> float:
    """
    Жадное сопоставление по убыванию перекрытия следов, один эталон на шаг
    и один шаг на эталон. Шаг без эталона получает 0.
    """
    if not steps:
        return 0.0
    pairs = []
    for i, obs in enumerate(steps):
        for j, ref in enumerate(references):
            if ref.op != obs.op:
                continue
            overlap = obs.footprint.overlap(ref.footprint)
            if overlap > 0:
                pairs.append((-overlap, i, j))
    pairs.sort()
    scores = np.zeros(len(steps))
    used_steps, used_refs = set(), set()
    for _, i, j in pairs:
        if i in used_steps or j in used_refs:
            continue
        used_steps.add(i)
        used_refs.add(j)
        scores[i] = payload_fidelity(steps[i], references[j])
    missing = len(steps) - len(used_steps)
    if missing:
        logger.warning(f"VisFid: {missing} of {len(steps)} decisive steps have no pseudo-reference, scored 0")
    return float(scores.mean())


def visfid(traj: Trajectory, references: Sequence[Observation]) -> float:
    return visfid_observations(decisive_observations(traj), references)


# ---------------------------------------------------------------------------------
# ПОВЕДЕНЧЕСКОЕ СХОДСТВО
# ---------------------------------------------------------------------------------

def step_token(step: TrajStep) -> str:
    return step.call.op if step.call is not None else "ANSWER"


def step_similarity(a: TrajStep, b: TrajStep) -> float:
    """IoU следов по объёму (× ANLS для пары OCR); ANSWER совпадает только с ANSWER."""
    if a.obs is None or b.obs is None:
        return 1.0 if a.obs is None and b.obs is None and a.call is None and b.call is None else 0.0
    sim = a.obs.footprint.iou(b.obs.footprint)
    if a.obs.op == "OCR" and b.obs.op == "OCR" and a.obs.success and b.obs.success:
        sim *= anls(a.obs.payload["text"], b.obs.payload["text"])
    return float(sim)


def soft_dtw(cost: np.ndarray, gamma: float) -> float:
    """Soft-DTW: R[i,j] = D[i,j] + softmin_γ(R[i−1,j−1], R[i−1,j], R[i,j−1])."""
    if gamma <= 0:
        raise ValueError(f"soft-DTW: γ должно быть > 0, получено {gamma}")
    n, m = cost.shape
    R = np.full((n + 1, m + 1), np.inf)
    R[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            prev = np.array([R[i - 1, j - 1], R[i - 1, j], R[i, j - 1]])
            softmin = -gamma * logsumexp(-prev / gamma)
            R[i, j] = cost[i - 1, j - 1] + softmin
    return float(R[n, m])


def alignment_score(cost: np.ndarray, gamma: float) -> float:
    """
    ĉ = clip(sdtw(D)/sdtw(1), 0, 1) нормирует по худшей матрице той же формы,
    затем (e^{−ĉ/γ} − e^{−1/γ})/(1 − e^{−1/γ}) переводит в [0,1].
    """
    worst = soft_dtw(np.ones_like(cost), gamma)
    c_hat = float(np.clip(soft_dtw(cost, gamma) / worst, 0.0, 1.0)) if worst > 0 else 0.0
    floor = np.exp(-1.0 / gamma)
    return float((np.exp(-c_hat / gamma) - floor) / (1.0 - floor))


def sim_behav(a: Trajectory, b: Trajectory, cfg: Optional[RcprConfig] = None) -> float:
    """ω_edit·(1 − Lev/max длины) + ω_align·выравнивание soft-DTW по шагам."""
    cfg = cfg or RcprConfig()
    if not a.steps or not b.steps:
        raise ValueError("sim_behav: обе траектории должны быть непустыми")
    ta, tb = [step_token(s) for s in a.steps], [step_token(s) for s in b.steps]
    edit = 1.0 - levenshtein(ta, tb) / max(len(ta), len(tb))
    cost = np.array([[1.0 - step_similarity(x, y) for y in b.steps] for x in a.steps])
    align = alignment_score(cost, cfg.gamma)
    return float(np.clip(cfg.omega_edit * edit + cfg.omega_align * align, 0.0, 1.0))


def sim_behav_sensitivity(
    pairs: Sequence[Tuple[Trajectory, Trajectory]],
    base: RcprConfig,
    gammas: Sequence[float] = (0.15, 0.20, 0.25, 0.30),
) -> List[Dict[str, float]]:
    """Средний Sim_behav по парам при разных γ и отклонение от базового γ."""
    def mean_at(gamma: float) -> float:
        cfg = dataclasses.replace(base, gamma=gamma)
        return float(np.mean([sim_behav(a, b, cfg) for a, b in pairs])) if pairs else 0.0

    reference = mean_at(base.gamma)
    rows = []
    for gamma in gammas:
        value = mean_at(gamma)
        rows.append({"gamma": gamma, "sim_behav": value, "delta": value - reference})
    return rows
