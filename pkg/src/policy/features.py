# src/policy/features.py

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from config import QUERY_KINDS, WorldConfig
from toyworld.scene import N_REGIONS, OPS, REGION_OPS, TOOL_OPS, Query, glyph_index
from toyworld.tools import EpisodeState, quadrant_from_box


# ---------------------------------------------------------------------------------
# АЛФАВИТ ДЕЙСТВИЙ
# ---------------------------------------------------------------------------------

class ActionSpace:
    """
    Дискретные действия: 5 региональных инструментов × 16 регионов,
    TEMP × F стартовых кадров и один терминальный ANSWER.
    """

    def __init__(self, n_frames: int):
        self.n_frames = n_frames
        self.n_region_actions = len(REGION_OPS) * N_REGIONS
        self.size = self.n_region_actions + n_frames + 1
        self.answer_index = self.size - 1

    def encode(self, op: str, arg: int = 0) -> int:
        if op == "ANSWER":
            return self.answer_index
        if op == "TEMP":
            return self.n_region_actions + arg
        return REGION_OPS.index(op) * N_REGIONS + arg

    def decode(self, idx: int) -> Tuple[str, int]:
        if idx == self.answer_index:
            return "ANSWER", 0
        if idx >= self.n_region_actions:
            return "TEMP", idx - self.n_region_actions
        return REGION_OPS[idx // N_REGIONS], idx % N_REGIONS

    def op_of(self, idx: int) -> str:
        return self.decode(idx)[0]


# ---------------------------------------------------------------------------------
# РАСКЛАДКА ПРИЗНАКОВ
# ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureLayout:
    blocks: Tuple[Tuple[str, int], ...]

    @staticmethod
    def for_world(world: WorldConfig) -> "FeatureLayout":
        return FeatureLayout(blocks=(
            ("counts", world.n_classes),
            ("geometry", 6),
            ("last_op", len(OPS)),
            ("present", len(TOOL_OPS)),
            ("seg_cls", world.n_classes),
            ("glyph", world.glyph_alphabet),
            ("color", world.n_colors),
            ("quadrant", 4),
            ("start_bin", world.n_answers),
            ("step", 1),
            ("kind", len(QUERY_KINDS)),
            ("region", N_REGIONS),
            ("bias", 1),
        ))

    @property
    def dim(self) -> int:
        return sum(n for _, n in self.blocks)

    def slices(self) -> Dict[str, slice]:
        out, pos = {}, 0
        for name, n in self.blocks:
            out[name] = slice(pos, pos + n)
            pos += n
        return out

    def evidence_index(self) -> np.ndarray:
        """Блок буфера улик: его прячет feedback dropout."""
        s = self.slices()
        return np.arange(s["present"].start, s["start_bin"].stop)

    def answer_index(self) -> np.ndarray:
        """Вход головы ответа: улики + тип запроса + смещение."""
        s = self.slices()
        return np.concatenate([
            self.evidence_index(),
            np.arange(s["kind"].start, s["kind"].stop),
            np.arange(s["bias"].start, s["bias"].stop),
        ])

    @property
    def answer_dim(self) -> int:
        return int(self.answer_index().size)


def class_census(state: EpisodeState) -> np.ndarray:
    """Сколько объектов каждого класса видно (маска на кадре f0 пересекает вид)."""
    clip, view = state.clip, state.view
    counts = np.zeros(clip.world.n_classes)
    window = view.rect.cell_mask(clip.height, clip.width)
    for obj in clip.objects:
        if np.any(obj.mask_at(view.f0, clip.height, clip.width) & window):
            counts[obj.cls] += 1
    return counts


def featurize_state(
    state: EpisodeState,
    query: Optional[Query],
    step: int,
    max_steps: int,
    layout: Optional[FeatureLayout] = None,
) -> np.ndarray:
    """Вектор состояния фиксированной размерности (замена скрытого состояния VLM)."""
    clip, view = state.clip, state.view
    world = clip.world
    layout = layout or FeatureLayout.for_world(world)
    s = layout.slices()
    x = np.zeros(layout.dim)

    x[s["counts"]] = class_census(state)
    r = view.rect
    span = max(clip.n_frames - 1, 1)
    x[s["geometry"]] = [r.x / clip.width, r.y / clip.height, r.w / clip.width, r.h / clip.height,
                        view.f0 / span, view.f1 / span]
    if state.last_op is not None:
        x[s["last_op"].start + OPS.index(state.last_op)] = 1.0

    for op, _ in state.evidence:
        x[s["present"].start + TOOL_OPS.index(op)] = 1.0
    seg = state.latest("SEG")
    if seg is not None:
        x[s["seg_cls"].start + seg.payload["cls"]] = 1.0
    ocr = state.latest("OCR")
    if ocr is not None and ocr.payload["text"]:
        x[s["glyph"].start + glyph_index(ocr.payload["text"][0])] = 1.0
    prop = state.latest("PROP")
    if prop is not None:
        x[s["color"].start + prop.payload["attributes"]["color"]] = 1.0
    trk = state.latest("TRK")
    if trk is not None:
        x[s["quadrant"].start + quadrant_from_box(trk.payload["boxes"][-1], clip.height, clip.width)] = 1.0
    temp = state.latest("TEMP")
    if temp is not None:
        start = temp.payload["interval"][0]
        x[s["start_bin"].start + min(world.n_answers - 1, start * world.n_answers // clip.n_frames)] = 1.0

    x[s["step"]] = step / max(max_steps, 1)
    if query is not None:
        x[s["kind"].start + QUERY_KINDS.index(query.kind)] = 1.0
        if query.kind != "temporal":
            x[s["region"].start + query.target_region] = 1.0
    x[s["bias"]] = 1.0
    return x
