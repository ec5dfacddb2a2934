# src/metrics/process.py

import dataclasses
import itertools
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import RcprConfig
from percept.embedding import adjacent_cosines
from percept.encoder import FrozenEncoder, trajectory_pairs
from percept.zstats import ZStats
from policy.model import Trajectory
from toyworld.scene import Clip
from toyworld.verify import verify_step
from utils.logger import get_logger

logger = get_logger("pixelsoul-metrics")


# ---------------------------------------------------------------------------------
# RaPR
# ---------------------------------------------------------------------------------

def rapr(u: Sequence[int]) -> float:
    """Доля валидных визуальных шагов; пустая траектория → 0."""
    bits = np.asarray(u, dtype=float)
    if bits.size == 0:
        logger.debug("RaPR: empty trajectory, reported as 0")
        return 0.0
    return float(bits.mean())


def validity_bits(traj: Trajectory, clip: Clip) -> List[int]:
    """u_t по инструментальным шагам: успешный валидный вызов, прошедший проверку по разметке."""
    return [int(verify_step(s.obs, clip)[0]) for s in traj.tool_steps]


# ---------------------------------------------------------------------------------
# RaCPR
# ---------------------------------------------------------------------------------

@dataclass
class ChainCandidate:
    """Максимальный отрезок подряд идущих g_t = 1; индексы — номера шагов t (1..T−1)."""
    start: int
    stop: int
    cosines: np.ndarray
    valid: np.ndarray

    @property
    def size(self) -> int:
        return self.stop - self.start


def gates(z_cos: np.ndarray, u: Sequence[int], tau: float) -> np.ndarray:
    """g_t = 1{u_{t−1}=1, u_t=1, c̃_t ≥ τ} для t = 1..T−1 (позиция i ↔ шаг i+1)."""
    bits = np.asarray(u, dtype=int)
    return (bits[:-1] == 1) & (bits[1:] == 1) & (np.asarray(z_cos) >= tau)


def chain_candidates(z_cos: np.ndarray, u: Sequence[int], cfg: RcprConfig) -> List[ChainCandidate]:
    g = gates(z_cos, u, cfg.tau)
    bits = np.asarray(u, dtype=int)
    out: List[ChainCandidate] = []
    pos = 0
    for on, run in itertools.groupby(g):
        n = len(list(run))
        if on and n >= cfg.l_min:
            out.append(ChainCandidate(pos, pos + n, np.asarray(z_cos[pos:pos + n]), bits[pos + 1:pos + 1 + n]))
        pos += n
    return out


def chain_quality(chain: ChainCandidate, cfg: RcprConfig) -> float:
    """q(C) = mean [c̃_t − τ]_+ − α_len·(|C| − L0)_+/|C| − α_inv·Σ(1 − u_t)/|C|."""
    n = chain.size
    hinge = np.maximum(chain.cosines - cfg.tau, 0.0).mean()
    length = cfg.alpha_len * max(0, n - cfg.l0) / n
    invalid = cfg.alpha_inv * float(np.sum(1 - chain.valid)) / n
    return float(hinge - length - invalid)


def racpr(embeddings: np.ndarray, u: Sequence[int], cfg: RcprConfig, stats: ZStats) -> float:
    """
    RaCPR = max_C q(C) по квалифицированным цепочкам (|C| ≥ L_min), иначе 0.
    embeddings — шаги из замороженного внешнего энкодера, не из обучаемого проектора.
    """
    E = np.asarray(embeddings, dtype=float)
    if len(E) < 2:
        return 0.0
    if len(E) != len(u):
        raise ValueError(f"RaCPR: {len(E)} эмбеддингов на {len(u)} битов валидности")
    return racpr_from_cosines(stats.z(adjacent_cosines(E)), u, cfg)


def racpr_from_cosines(z_cos: np.ndarray, u: Sequence[int], cfg: RcprConfig) -> float:
    chains = chain_candidates(np.asarray(z_cos, dtype=float), u, cfg)
    if not chains:
        return 0.0
    return max(chain_quality(c, cfg) for c in chains)


def tool_step_embeddings(traj: Trajectory, clip: Clip, encoder: FrozenEncoder) -> np.ndarray:
    pairs = [(c, o) for c, o in trajectory_pairs(traj) if c is not None]
    return encoder.encode_steps(clip, pairs)


# ---------------------------------------------------------------------------------
# СВОДКИ
# ---------------------------------------------------------------------------------

@dataclass
class ProcessRecord:
    clip_id: str
    kind: str
    correct: bool
    rapr: float
    racpr: float
    visfid: float
    length: int


def process_record(traj: Trajectory, clip: Clip, encoder: FrozenEncoder, stats: ZStats,
                   cfg: RcprConfig, visfid: float = 0.0) -> ProcessRecord:
    u = validity_bits(traj, clip)
    E = tool_step_embeddings(traj, clip, encoder)
    return ProcessRecord(
        clip_id=traj.clip_id,
        kind=traj.query.kind if traj.query is not None else "",
        correct=traj.correct,
        rapr=rapr(u),
        racpr=racpr(E, u, cfg, stats),
        visfid=visfid,
        length=traj.length,
    )


def process_summary(records: Sequence[ProcessRecord]) -> Dict[str, float]:
    if not records:
        return {"n": 0}
    return {
        "n": len(records),
        "accuracy": float(np.mean([r.correct for r in records])),
        "rapr": float(np.mean([r.rapr for r in records])),
        "racpr": float(np.mean([r.racpr for r in records])),
        "visfid": float(np.mean([r.visfid for r in records])),
        "chain_length": float(np.mean([r.length for r in records])),
    }


def acceptance_per_1k(n_accepted: int, n_generated: int) -> float:
    return 1000.0 * n_accepted / n_generated if n_generated else 0.0


def racpr_sensitivity(
    items: Sequence[Tuple[np.ndarray, Sequence[int]]],
    stats: ZStats,
    base: RcprConfig,
    taus: Sequence[float] = (0.25, 0.30, 0.35, 0.40),
    l_mins: Sequence[int] = (2, 3, 4),
) -> List[Dict[str, float]]:
    """Средний RaCPR на сетке (τ, L_min) и отклонение от значения при базовом конфиге."""
    def mean_at(cfg: RcprConfig) -> float:
        return float(np.mean([racpr(E, u, cfg, stats) for E, u in items])) if items else 0.0

    reference = mean_at(base)
    rows = []
    for tau, l_min in itertools.product(taus, l_mins):
        cfg = dataclasses.replace(base, tau=tau, l_min=l_min)
        value = mean_at(cfg)
        rows.append({"tau": tau, "l_min": l_min, "racpr": value, "delta": value - reference})
    return rows


def max_deviation(rows: Sequence[Dict[str, float]]) -> Optional[float]:
    return max((abs(r["delta"]) for r in rows), default=None)
