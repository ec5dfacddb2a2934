# src/index/keys.py

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from config import IndexConfig
from percept.encoder import FrozenEncoder, call_tokens, full_footprint, hash_tokens, visual_summary
from toyworld.scene import Clip, Footprint, Query
from toyworld.tools import Observation, ToolCall


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / n


@dataclass
class HybridKey:
    """Ключ индекса: текстовая и пиксельная части, каждая единичной нормы."""
    text: np.ndarray
    pixel: np.ndarray
    source_id: str = ""
    footprints: List[List[int]] = field(default_factory=list)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.text, self.pixel])

    def weighted(self, lam_pix: float) -> np.ndarray:
        """[(1−λ)·txt ‖ λ·pix]: скалярное произведение с ключом = смешанное сходство."""
        return np.concatenate([(1.0 - lam_pix) * self.text, lam_pix * self.pixel])


def pixel_encoder(n_codes: int, cfg: IndexConfig) -> FrozenEncoder:
    return FrozenEncoder.build(n_codes, cfg.pixel_dim, seed=cfg.encoder_seed)


def build_keys(
    clip: Clip,
    query: Query,
    observations: Sequence[Observation],
    encoder: FrozenEncoder,
    cfg: IndexConfig,
    calls: Sequence[ToolCall] = (),
    source_id: Optional[str] = None,
) -> HybridKey:
    """
    Текстовый ключ — хэш токенов запроса и промежуточных вызовов.
    Пиксельный ключ — средний дескриптор следов успешных наблюдений
    из замороженного энкодера (нет следов → весь клип).
    """
    tokens = list(query.tokens())
    for call in calls:
        tokens.extend(call_tokens(call))
    text = _unit(hash_tokens(tokens, cfg.text_dim, seed=cfg.encoder_seed))

    footprints: List[Footprint] = [o.footprint for o in observations if o.success] or [full_footprint(clip)]
    rows = np.stack([visual_summary(clip, fp) for fp in footprints])
    pixel = _unit(encoder.encode(rows).mean(axis=0))
    return HybridKey(text, pixel, source_id or clip.clip_id, [fp.to_list() for fp in footprints])


def key_similarity(a: HybridKey, b: HybridKey, lam_pix: float) -> float:
    return float((1.0 - lam_pix) * a.text @ b.text + lam_pix * a.pixel @ b.pixel)
