# src/consensus/dawid_skene.py

import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import logsumexp

from config import ConsensusConfig
from utils.logger import get_logger

logger = get_logger("pixelsoul-consensus")

MISSING = -1


@dataclass
class DsModel:
    """Априор классов π (C) и матрицы ошибок Π^(j) (N×C×C, строки стохастичны)."""
    prior: np.ndarray
    confusion: np.ndarray
    reliabilities: np.ndarray
    posteriors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    history: List[float] = field(default_factory=list)
    degenerate: bool = False

    @property
    def n_annotators(self) -> int:
        return int(self.confusion.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.prior.shape[0])

    def labels(self) -> np.ndarray:
        return self.posteriors.argmax(axis=1)


def _one_hot_ballots(ballots: np.ndarray, n_classes: int) -> np.ndarray:
    """(Q, N) с −1 для пропусков → (Q, N, C)."""
    A = np.zeros(ballots.shape + (n_classes,))
    q, j = np.nonzero(ballots != MISSING)
    A[q, j, ballots[q, j]] = 1.0
    return A


def _majority_posteriors(A: np.ndarray) -> np.ndarray:
    """Старт EM: доля голосов по классам; ничья делится поровну, пустой вопрос → равномерно."""
    votes = A.sum(axis=1)
    top = (votes == votes.max(axis=1, keepdims=True)).astype(float)
    return top / top.sum(axis=1, keepdims=True)


def _m_step(T: np.ndarray, A: np.ndarray, eps: float):
    n_classes = T.shape[1]
    prior = (T.sum(axis=0) + eps) / (T.shape[0] + n_classes * eps)
    counts = np.einsum("qc,qjk->jck", T, A) + eps
    confusion = counts / counts.sum(axis=2, keepdims=True)
    return prior, confusion


def _e_step(prior: np.ndarray, confusion: np.ndarray, A: np.ndarray, eps: float):
    """Постериоры и MAP-цель: log-правдоподобие + ε·Σ log параметров (Дирихле-априор)."""
    log_joint = np.log(prior)[None, :] + np.einsum("qjk,jck->qc", A, np.log(confusion))
    norm = logsumexp(log_joint, axis=1, keepdims=True)
    T = np.exp(log_joint - norm)
    objective = float(norm.sum()) + eps * float(np.log(confusion).sum() + np.log(prior).sum())
    return T, objective


def ds_em(ballots: np.ndarray, n_classes: int, cfg: Optional[ConsensusConfig] = None) -> DsModel:
    """
    Dawid–Skene EM по пачке вопросов. ballots: (Q, N) ответы N роллаутов, −1 — пропуск.
    Старт от большинства, остановка по относительному приросту < tol или max_iter.
    r_j = среднее диагонали Π^(j).
    """
    cfg = cfg or ConsensusConfig()
    B = np.asarray(ballots, dtype=int)
    if B.ndim != 2 or B.shape[1] < 2 or n_classes < 2:
        raise ValueError(f"DS-EM: нужно N ≥ 2 и C ≥ 2, получено ballots {B.shape}, C={n_classes}")
    if B.max(initial=MISSING) >= n_classes or B.min(initial=0) < MISSING:
        raise ValueError(f"DS-EM: ответы вне диапазона [−1, {n_classes - 1}]")

    observed = B[B != MISSING]
    degenerate = observed.size > 0 and bool(np.all(observed == observed[0]))
    A = _one_hot_ballots(B, n_classes)
    T = _majority_posteriors(A)
    if degenerate:
        # EM без разногласий не идентифицируем: априор по голосам, матрицы ошибок равномерные
        logger.warning(f"DS-EM: all {observed.size} ballots equal {int(observed[0])}, "
                       f"returning prior with uniform confusion")
        prior = (T.sum(axis=0) + cfg.ds_epsilon) / (T.shape[0] + n_classes * cfg.ds_epsilon)
        confusion = np.full((B.shape[1], n_classes, n_classes), 1.0 / n_classes)
        reliabilities = np.full(B.shape[1], 1.0 / n_classes)
        return DsModel(prior, confusion, reliabilities, T, [], True)

    prior, confusion = _m_step(T, A, cfg.ds_epsilon)
    history: List[float] = []
    for it in range(cfg.ds_max_iter):
        T, objective = _e_step(prior, confusion, A, cfg.ds_epsilon)
        history.append(objective)
        prior, confusion = _m_step(T, A, cfg.ds_epsilon)
        if it > 0:
            prev = history[-2]
            if abs(objective - prev) <= cfg.ds_tol * max(abs(prev), 1e-12):
                break

    reliabilities = np.einsum("jcc->j", confusion) / n_classes
    logger.info(f"DS-EM: Q={B.shape[0]} N={B.shape[1]} iters={len(history)} "
                f"r_min={reliabilities.min():.3f} r_max={reliabilities.max():.3f}")
    return DsModel(prior, confusion, reliabilities, T, history, degenerate)


# ---------------------------------------------------------------------------------
# СНАПШОТ
# ---------------------------------------------------------------------------------

def ds_to_json(model: DsModel) -> str:
    return json.dumps({
        "prior": model.prior.tolist(),
        "confusion": model.confusion.tolist(),
        "reliabilities": model.reliabilities.tolist(),
        "history": list(model.history),
        "degenerate": model.degenerate,
    }, sort_keys=True, indent=2)


def ds_from_json(text: str) -> DsModel:
    raw = json.loads(text)
    return DsModel(
        prior=np.asarray(raw["prior"]),
        confusion=np.asarray(raw["confusion"]),
        reliabilities=np.asarray(raw["reliabilities"]),
        history=list(raw["history"]),
        degenerate=bool(raw["degenerate"]),
    )
