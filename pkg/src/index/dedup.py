# src/index/dedup.py

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from PIL import Image
from scipy.fftpack import dct
from scipy.ndimage import binary_erosion, uniform_filter

from config import IndexConfig
from index.ivfpq import IvfPqIndex
from index.keys import HybridKey
from percept.encoder import FrozenEncoder, visual_summary
from toyworld.scene import Clip, Footprint
from utils.logger import get_logger

logger = get_logger("pixelsoul-index")

HASH_SIZE = 8
HASH_SCALE = 32
SSIM_WINDOW = 8


# ---------------------------------------------------------------------------------
# PHASH
# ---------------------------------------------------------------------------------

def phash(frame: np.ndarray) -> int:
    """
    64-битный DCT-хэш: сжатие до 32×32, 2-D DCT, блок 8×8 низких частот,
    порог по медиане 63 AC-коэффициентов; бит DC всегда 0.
    """
    grid = np.asarray(frame, dtype=np.float32)
    if grid.ndim != 2 or min(grid.shape) < HASH_SIZE:
        raise ValueError(f"pHash: нужен кадр не меньше 8×8, получено {grid.shape}")
    small = np.asarray(Image.fromarray(grid, mode="F").resize((HASH_SCALE, HASH_SCALE), Image.BILINEAR),
                       dtype=np.float64)
    coeffs = dct(dct(small, axis=0, norm="ortho"), axis=1, norm="ortho")
    block = coeffs[:HASH_SIZE, :HASH_SIZE].reshape(-1)
    median = np.median(block[1:])
    bits = block > median
    bits[0] = False
    return int(sum(1 << i for i, b in enumerate(bits) if b))


def hamming(a: int, b: int) -> int:
    return bin(a ^ b).count("1")


# ---------------------------------------------------------------------------------
# СТРУКТУРНОЕ СХОДСТВО И МАСКИ
# ---------------------------------------------------------------------------------

def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Средний SSIM по окнам 8×8 (скользящие средние, дисперсии, ковариация)."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    span = max(float(max(x.max(), y.max()) - min(x.min(), y.min())), 1.0)
    c1, c2 = (0.01 * span) ** 2, (0.03 * span) ** 2
    mx, my = uniform_filter(x, SSIM_WINDOW), uniform_filter(y, SSIM_WINDOW)
    vx = uniform_filter(x * x, SSIM_WINDOW) - mx * mx
    vy = uniform_filter(y * y, SSIM_WINDOW) - my * my
    cov = uniform_filter(x * y, SSIM_WINDOW) - mx * my
    s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def foreground(frame: np.ndarray) -> np.ndarray:
    """Клетки, отличные от самого частого кода (фона)."""
    codes = np.asarray(frame).astype(np.int64)
    background = np.bincount((codes - codes.min()).reshape(-1)).argmax() + codes.min()
    return codes != background


def eroded_overlap(a: np.ndarray, b: np.ndarray) -> float:
    """|A∩B| / min(|A|,|B|) по маскам переднего плана после эрозии 3×3."""
    ma = binary_erosion(foreground(a))
    mb = binary_erosion(foreground(b))
    smaller = min(int(ma.sum()), int(mb.sum()))
    if smaller == 0:
        return 0.0
    return float((ma & mb).sum() / smaller)


# ---------------------------------------------------------------------------------
# МЕДИА И РЕШЕНИЕ
# ---------------------------------------------------------------------------------

@dataclass
class Media:
    """Кадр (F=1) или клип: сетки кодов и единичные эмбеддинги по кадрам."""
    media_id: str
    frames: np.ndarray
    embeddings: np.ndarray
    hashes: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim == 2:
            self.frames = self.frames[None]
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=float))
        if not self.hashes:
            self.hashes = [phash(f) for f in self.frames]

    @property
    def is_clip(self) -> bool:
        return len(self.frames) > 1


def media_from_clip(clip: Clip, encoder: FrozenEncoder) -> Media:
    rows = np.stack([
        visual_summary(clip, Footprint(clip.full_rect(), f, f)) for f in range(clip.n_frames)
    ])
    return Media(clip.clip_id, clip.frames, encoder.encode(rows))


@dataclass
class DedupVerdict:
    a_id: str
    b_id: str
    hamming: int
    cosine: float
    ssim: float
    positive_rate: float
    duplicate: bool
    stage: str

    @property
    def decision(self) -> str:
        return "duplicate" if self.duplicate else "distinct"


def _image_verdict(a: Media, b: Media, cfg: IndexConfig) -> DedupVerdict:
    h = hamming(a.hashes[0], b.hashes[0])
    cos = float(a.embeddings[0] @ b.embeddings[0])
    if h <= cfg.hamming_max:
        # pHash-положительная пара снимается без перепроверки эмбеддингом
        return DedupVerdict(a.media_id, b.media_id, h, cos, float("nan"), 1.0, True, "phash")
    if cos < cfg.cosine_min:
        return DedupVerdict(a.media_id, b.media_id, h, cos, float("nan"), 0.0, False, "embedding")
    s = ssim(a.frames[0], b.frames[0])
    if s > cfg.ssim_confirm:
        return DedupVerdict(a.media_id, b.media_id, h, cos, s, 1.0, True, "ssim")
    if s < cfg.ssim_template and eroded_overlap(a.frames[0], b.frames[0]) < cfg.overlap_template:
        return DedupVerdict(a.media_id, b.media_id, h, cos, s, 0.0, False, "template")
    return DedupVerdict(a.media_id, b.media_id, h, cos, s, 1.0, True, "embedding")


def _clip_verdict(a: Media, b: Media, cfg: IndexConfig) -> DedupVerdict:
    n = min(len(a.frames), len(b.frames))
    positives, hams, coss, ssims = [], [], [], []
    for i in range(n):
        h = hamming(a.hashes[i], b.hashes[i])
        cos = float(a.embeddings[i] @ b.embeddings[i])
        s = ssim(a.frames[i], b.frames[i]) if h > cfg.hamming_max and cos >= cfg.cosine_min else float("nan")
        positives.append(h <= cfg.hamming_max or (cos >= cfg.cosine_min and s > cfg.ssim_clip))
        hams.append(h)
        coss.append(cos)
        ssims.append(s)
    rate = float(np.mean(positives)) if positives else 0.0
    return DedupVerdict(
        a.media_id, b.media_id, int(min(hams, default=64)), float(np.mean(coss)) if coss else 0.0,
        float(np.nanmean(ssims)) if not np.all(np.isnan(ssims)) else float("nan"),
        rate, rate >= cfg.clip_positive_rate, "clip",
    )


def dedup_pair(a: Media, b: Media, cfg: Optional[IndexConfig] = None) -> DedupVerdict:
    """Двухступенчатое правило: pHash, затем эмбеддинг с SSIM-разбором; клипы — доля положительных кадров."""
    cfg = cfg or IndexConfig()
    if a.is_clip != b.is_clip:
        raise ValueError(f"Dedup: {a.media_id} и {b.media_id} разного вида")
    if a.is_clip:
        return _clip_verdict(a, b, cfg)
    return _image_verdict(a, b, cfg)


# ---------------------------------------------------------------------------------
# ПРИЁМ В ИНДЕКС
# ---------------------------------------------------------------------------------

class IngestGate:
    """
    Приём в индекс: дубликаты оценочных медиа отклоняются сразу,
    из дубликатов среди обучающих остаётся самый ранний, поздний уходит в блок-лист.
    """

    def __init__(self, index: IvfPqIndex, eval_media: List[Media], cfg: Optional[IndexConfig] = None):
        self.index = index
        self.cfg = cfg or index.cfg
        self.eval_media = list(eval_media)
        self.accepted: Dict[str, Media] = {}
        self.log: List[Dict[str, str]] = []
        index.install_whitelist(m.media_id for m in self.eval_media)

    def _first_duplicate(self, media: Media, pool: List[Media]) -> Optional[DedupVerdict]:
        for other in pool:
            if other.is_clip != media.is_clip:
                continue
            verdict = dedup_pair(other, media, self.cfg)
            if verdict.duplicate:
                return verdict
        return None

    def ingest(self, media: Media, key: HybridKey) -> str:
        hit = self._first_duplicate(media, self.eval_media)
        if hit is not None:
            status = "eval_duplicate"
        else:
            hit = self._first_duplicate(media, list(self.accepted.values()))
            status = "duplicate" if hit is not None else "accepted"
        if status == "accepted" and self.index.add(key):
            self.accepted[media.media_id] = media
        elif status != "accepted":
            self.index.block(media.media_id)
        else:
            status = "rejected"
        self.log.append({"id": media.media_id, "status": status, "against": hit.a_id if hit else ""})
        if status != "accepted":
            logger.info(f"Ingest: {media.media_id} {status}" + (f" (vs {hit.a_id}, {hit.stage})" if hit else ""))
        return status
