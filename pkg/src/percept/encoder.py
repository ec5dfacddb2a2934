# src/percept/encoder.py

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.utils import murmurhash3_32

from percept.embedding import Projector, embed_inputs
from toyworld.scene import OPS, Clip, Footprint, Rect
from toyworld.tools import Observation, ToolCall

# (вызов, наблюдение); (None, None) — шаг ANSWER
StepPair = Tuple[Optional[ToolCall], Optional[Observation]]


# ---------------------------------------------------------------------------------
# ВИЗУАЛЬНАЯ СВОДКА v_t
# ---------------------------------------------------------------------------------

def _dilate(rect: Rect, height: int, width: int) -> Rect:
    x0, y0 = max(0, rect.x - 1), max(0, rect.y - 1)
    x1, y1 = min(width, rect.x + rect.w + 1), min(height, rect.y + rect.h + 1)
    return Rect(x0, y0, x1 - x0, y1 - y0)


def visual_summary(clip: Clip, footprint: Footprint) -> np.ndarray:
    """
    Маскированное среднее one-hot кодов клеток по следу (прямоугольник × кадры).
    След меньше 9 клеток расширяется 3×3.
    """
    n_codes = clip.world.n_codes
    rect = footprint.rect
    if rect.area < 9:
        rect = _dilate(rect, clip.height, clip.width)
    f0 = min(max(footprint.f0, 0), clip.n_frames - 1)
    f1 = min(max(footprint.f1, f0), clip.n_frames - 1)
    cells = clip.frames[f0:f1 + 1, rect.y:rect.y + rect.h, rect.x:rect.x + rect.w]
    if cells.size == 0:
        return np.zeros(n_codes)
    counts = np.bincount(cells.reshape(-1), minlength=n_codes)[:n_codes]
    return counts / cells.size


def full_footprint(clip: Clip) -> Footprint:
    return Footprint(clip.full_rect(), 0, clip.n_frames - 1)


# ---------------------------------------------------------------------------------
# ТЕКСТОВЫЕ ПРИЗНАКИ x_t
# ---------------------------------------------------------------------------------

def hash_tokens(tokens: Sequence[str], dim: int, seed: int = 0) -> np.ndarray:
    """Знаковое хэш-вложение токенов (murmurhash3), нормированное по L2."""
    out = np.zeros(dim)
    for tok in tokens:
        h = murmurhash3_32(tok, seed=seed, positive=True)
        out[h % dim] += 1.0 if (h >> 31) & 1 == 0 else -1.0
    n = np.linalg.norm(out)
    return out / n if n > 0 else out


def call_tokens(call: Optional[ToolCall]) -> List[str]:
    if call is None:
        return ["ANSWER"]
    return [call.op, call.token()]


def op_onehot(op: Optional[str]) -> np.ndarray:
    v = np.zeros(len(OPS))
    if op is not None:
        v[OPS.index(op)] = 1.0
    return v


# ---------------------------------------------------------------------------------
# ВХОДЫ ПО ШАГАМ
# ---------------------------------------------------------------------------------

def trajectory_pairs(traj) -> List[StepPair]:
    """Шаги политики (policy.model.Trajectory) в виде пар; ANSWER → (None, None)."""
    return [(s.call, s.obs) for s in traj.steps]


def trace_pairs(trace) -> List[StepPair]:
    """Траектория учителя: инструментальные шаги + завершающий ANSWER."""
    return [(s.call, s.obs) for s in trace.steps] + [(None, None)]


def summaries(clip: Clip, pairs: Sequence[StepPair]) -> List[np.ndarray]:
    """s_0 = весь клип, s_{t+1} = след наблюдения шага t (для ANSWER повторяем s_t)."""
    out = [visual_summary(clip, full_footprint(clip))]
    for _, obs in pairs:
        out.append(visual_summary(clip, obs.footprint) if obs is not None else out[-1])
    return out


def step_inputs(clip: Clip, pairs: Sequence[StepPair]) -> np.ndarray:
    """Строки [v_t ‖ x_t ‖ onehot(a_{t−1})] для проектора шагов."""
    d = clip.world.n_codes
    s = summaries(clip, pairs)
    rows, prev = [], None
    for t, (call, _) in enumerate(pairs):
        rows.append(np.concatenate([s[t + 1], hash_tokens(call_tokens(call), d), op_onehot(prev)]))
        prev = call.op if call is not None else "ANSWER"
    return np.stack(rows) if rows else np.zeros((0, 2 * d + len(OPS)))


def transition_rows(clip: Clip, pairs: Sequence[StepPair]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Переходы для головы динамики: вход [s_t ‖ x_t ‖ onehot(a_t)],
    цель s_{t+1} и валидность (успешный валидный вызов). ANSWER пропускается.
    """
    d = clip.world.n_codes
    s = summaries(clip, pairs)
    xs, ys, valid = [], [], []
    for t, (call, obs) in enumerate(pairs):
        if call is None:
            continue
        xs.append(np.concatenate([s[t], hash_tokens(call_tokens(call), d), op_onehot(call.op)]))
        ys.append(s[t + 1])
        valid.append(float(obs.valid_call and obs.success))
    if not xs:
        return np.zeros((0, 2 * d + len(OPS))), np.zeros((0, d)), np.zeros(0)
    return np.stack(xs), np.stack(ys), np.asarray(valid)


def input_dim(n_codes: int) -> int:
    return 2 * n_codes + len(OPS)


# ---------------------------------------------------------------------------------
# ЗАМОРОЖЕННЫЙ ВНЕШНИЙ ЭНКОДЕР
# ---------------------------------------------------------------------------------

@dataclass
class FrozenEncoder:
    """
    Случайный проектор с фиксированным seed, никогда не обучается.
    Используется RaCPR и ключами индекса, отдельно от обучаемого проектора.
    """
    projector: Projector
    seed: int

    @staticmethod
    def build(in_dim: int, out_dim: int, seed: int, hidden: int = 128) -> "FrozenEncoder":
        return FrozenEncoder(Projector.init(in_dim, hidden, out_dim, seed=seed, layernorm=False), seed)

    def encode(self, rows: np.ndarray) -> np.ndarray:
        return embed_inputs(self.projector, np.atleast_2d(rows))[0]

    def encode_steps(self, clip: Clip, pairs: Sequence[StepPair]) -> np.ndarray:
        rows = step_inputs(clip, pairs)
        if len(rows) == 0:
            return np.zeros((0, self.projector.out_dim))
        return self.encode(rows)
