# src/percept/zstats.py

import json
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Sequence

import numpy as np

from percept.embedding import adjacent_cosines
from utils.logger import get_logger

logger = get_logger("pixelsoul-percept")

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class ZStats:
    """Замороженные среднее/σ смежных косинусов для одного семейства задач."""
    family: str
    mean: float
    std: float
    count: int = 0

    def z(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.mean) / self.std


def fit_zstats(dev_embeddings: Iterable[np.ndarray], family: str) -> ZStats:
    """
    dev_embeddings — последовательности E_0..E_T по траекториям dev-сплита.
    σ популяционная, с полом 1e-6.
    """
    cosines = [adjacent_cosines(E) for E in dev_embeddings]
    flat = np.concatenate(cosines) if cosines else np.zeros(0)
    if flat.size < 2:
        raise ValueError(f"ZStats: семейству {family!r} нужно ≥ 2 смежных пар, есть {flat.size}")
    std = max(float(flat.std()), STD_FLOOR)
    return ZStats(family=family, mean=float(flat.mean()), std=std, count=int(flat.size))


def coherence_reward(embeddings: np.ndarray, stats: ZStats) -> float:
    """R_coh = Σ_t (cos(E_t, E_{t−1}) − μ)/σ; меньше двух шагов → 0."""
    cos = adjacent_cosines(embeddings)
    if cos.size == 0:
        return 0.0
    return float(stats.z(cos).sum())


# ---------------------------------------------------------------------------------
# СНАПШОТ
# ---------------------------------------------------------------------------------

def zstats_to_json(stats: Sequence[ZStats]) -> str:
    return json.dumps({s.family: asdict(s) for s in stats}, sort_keys=True, indent=2)


def zstats_from_json(text: str) -> Dict[str, ZStats]:
    raw = json.loads(text)
    return {k: ZStats(**v) for k, v in raw.items()}
