# src/toyworld/verify.py

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from toyworld.scene import Clip, Rect, zoom_rect
from toyworld.tools import Observation
from utils.errors import ConfigError

# Пороги валидности по инструментам (TRK — средний IoU по кадрам вместо HOTA).
THRESHOLDS = {
    "SEG": 0.5,
    "ZOOM": 0.5,
    "TRK": 0.15,
    "OCR": 0.85,
    "TEMP": 0.5,
    "PROP": 0.5,
}


# ---------------------------------------------------------------------------------
# МЕТРИКИ
# ---------------------------------------------------------------------------------

def levenshtein(a: Sequence, b: Sequence) -> int:
    """Расстояние редактирования (вставка/удаление/замена по 1)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def anls(pred: str, truth: str) -> float:
    longest = max(len(pred), len(truth))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(pred, truth) / longest


def box_iou(a: Sequence[int], b: Sequence[int]) -> float:
    ra, rb = Rect(*a), Rect(*b)
    inter = ra.intersect(rb)
    inter_area = inter.area if inter else 0
    union = ra.area + rb.area - inter_area
    return inter_area / union if union > 0 else 0.0


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return float(np.count_nonzero(a & b) / union)


def tiou(a: Sequence[int], b: Sequence[int]) -> float:
    """IoU отрезков кадров, концы включительно: [2,5] vs [3,6] → 3/5."""
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def interval_f1(a: Sequence[int], b: Sequence[int]) -> float:
    """F1 по множествам кадров двух отрезков."""
    sa = set(range(a[0], a[1] + 1))
    sb = set(range(b[0], b[1] + 1))
    if not sa and not sb:
        return 1.0
    inter = len(sa & sb)
    if inter == 0:
        return 0.0
    precision, recall = inter / len(sa), inter / len(sb)
    return 2 * precision * recall / (precision + recall)


def attribute_f1(a: Dict[str, int], b: Dict[str, int]) -> float:
    """F1 по парам ключ-значение."""
    pa, pb = set(a.items()), set(b.items())
    if not pa and not pb:
        return 1.0
    inter = len(pa & pb)
    if inter == 0:
        return 0.0
    precision, recall = inter / len(pa), inter / len(pb)
    return 2 * precision * recall / (precision + recall)


def attribute_match(pred: Dict[str, int], truth: Dict[str, int]) -> float:
    if not truth:
        return 0.0
    return sum(1 for k, v in truth.items() if pred.get(k) == v) / len(truth)


def tracklet_iou(a: List[Sequence[int]], b: List[Sequence[int]]) -> float:
    n = min(len(a), len(b))
    if n == 0:
        return 0.0
    return float(np.mean([box_iou(a[i], b[i]) for i in range(n)]))


def placed_mask(mask: np.ndarray, box: Sequence[int], height: int, width: int) -> np.ndarray:
    full = np.zeros((height, width), dtype=bool)
    x, y, w, h = box
    full[y:y + h, x:x + w] = mask[:h, :w]
    return full


# ---------------------------------------------------------------------------------
# ПРОВЕРКА ШАГА ПО РАЗМЕТКЕ
# ---------------------------------------------------------------------------------

def step_fidelity(obs: Observation, clip: Clip) -> float:
    p = obs.payload
    if obs.op == "SEG":
        obj = clip.object_by_id(p["object"])
        pred = placed_mask(np.asarray(p["mask"], dtype=bool), p["box"], clip.height, clip.width)
        return mask_iou(pred, obj.mask_at(p["frame"], clip.height, clip.width))
    if obs.op == "ZOOM":
        # IoU с увеличением региона, где цель на этом кадре
        obj = clip.object_by_id(p["object"])
        ideal = zoom_rect(obj.region_at(p["frame"], clip.height, clip.width), clip.height, clip.width)
        return box_iou(p["rect"], ideal.as_list())
    if obs.op == "TRK":
        obj = clip.object_by_id(p["object"])
        truth = [obj.box_at(p["f0"] + i).as_list() for i in range(len(p["boxes"]))]
        return tracklet_iou(p["boxes"], truth)
    if obs.op == "OCR":
        return anls(p["text"], clip.object_by_id(p["object"]).text)
    if obs.op == "TEMP":
        _, s, e = clip.events[p["event"]]
        return tiou(p["interval"], (s, e))
    if obs.op == "PROP":
        return attribute_match(p["attributes"], clip.object_by_id(p["object"]).attributes)
    return 0.0


def verify_step(obs: Observation, clip: Clip) -> Tuple[bool, float]:
    """(valid, fidelity): fidelity в [0,1], valid ⇔ fidelity ≥ порога инструмента."""
    if not obs.success or not obs.valid_call:
        return False, 0.0
    fidelity = float(np.clip(step_fidelity(obs, clip), 0.0, 1.0))
    return fidelity >= THRESHOLDS[obs.op], fidelity


def payload_fidelity(a: Observation, b: Observation) -> float:
    """Сходство двух наблюдений одного инструмента по его родной метрике (для псевдо-эталонов)."""
    if a.op != b.op or not a.success or not b.success:
        return 0.0
    pa, pb = a.payload, b.payload
    if a.op == "SEG":
        return box_iou(pa["box"], pb["box"])
    if a.op == "ZOOM":
        return box_iou(pa["rect"], pb["rect"])
    if a.op == "TRK":
        return tracklet_iou(pa["boxes"], pb["boxes"])
    if a.op == "OCR":
        return anls(pa["text"], pb["text"])
    if a.op == "TEMP":
        return interval_f1(pa["interval"], pb["interval"])
    if a.op == "PROP":
        return attribute_f1(pa["attributes"], pb["attributes"])
    return 0.0


# ---------------------------------------------------------------------------------
# ПРИЁМКА ТРАЕКТОРИИ УЧИТЕЛЯ
# ---------------------------------------------------------------------------------

def check_weights(weights: Sequence[float]) -> None:
    if len(weights) != 3 or abs(sum(weights) - 1.0) > 1e-9:
        raise ConfigError(f"веса (α,β,γ) должны суммироваться в 1, получено {tuple(weights)}",
                          field="teacher.accept_weights")


def trace_score(components: Sequence[float], weights: Sequence[float]) -> float:
    check_weights(weights)
    return float(sum(w * c for w, c in zip(weights, components)))


def accept_trace(trace, weights: Sequence[float] = (0.4, 0.3, 0.3), tau0: float = 0.65) -> bool:
    """Принимаем, если все шаги прошли проверку И S(τ) ≥ τ0 (граница включительно)."""
    score = trace_score(trace.components, weights)
    if not trace.all_ops_pass:
        return False
    return score >= tau0 - 1e-12
