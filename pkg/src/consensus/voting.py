# src/consensus/voting.py

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.logger import get_logger

logger = get_logger("pixelsoul-consensus")

TIE_EPS = 1e-12


@dataclass
class RolloutBallot:
    """Голос одного роллаута: ответ и всё, из чего собирается его вес."""
    answer: int
    entropy: float = 0.0
    confidence: float = 1.0
    visfid: float = 1.0
    reliability: float = 1.0
    weight: float = 0.0

    @property
    def raw_weight(self) -> float:
        return float(np.exp(-self.entropy) * self.confidence * self.visfid * self.reliability)


@dataclass
class ConsensusResult:
    answer: Optional[int]
    margin: float
    scores: List[float]
    conformal_set: Tuple[int, ...]
    answered: bool
    weights: List[float] = field(default_factory=list)
    exemplar: Optional[int] = None

    def to_record(self, ballots: Sequence[RolloutBallot]) -> Dict[str, Any]:
        """Строка лога решения с полным составом голосов (для аудита и повтора)."""
        rec = asdict(self)
        rec["conformal_set"] = list(self.conformal_set)
        rec["ballots"] = [asdict(b) for b in ballots]
        return rec


def ballot_weights(ballots: Sequence[RolloutBallot]) -> np.ndarray:
    """w_j ∝ exp(−H_j)·Cal_j·VisFid_j·r_j, нормированы на 1; все нули → равные веса."""
    raw = np.array([b.raw_weight for b in ballots], dtype=float)
    total = raw.sum()
    if not np.isfinite(total) or total <= 0:
        logger.warning(f"Consensus: all {len(ballots)} ballot weights are zero, falling back to equal weights")
        return np.full(len(ballots), 1.0 / max(len(ballots), 1))
    return raw / total


def class_scores(answers: Sequence[int], weights: np.ndarray, n_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(answers, dtype=int), weights=weights, minlength=n_classes).astype(float)


def normalized_margin(scores: np.ndarray) -> float:
    """(s₍₁₎ − s₍₂₎)/Σ s; один класс с голосами → 1."""
    total = scores.sum()
    if total <= 0:
        return 0.0
    top = np.sort(scores)[::-1]
    second = top[1] if top.size > 1 else 0.0
    return float((top[0] - second) / total)


def conformal_set(scores: np.ndarray, threshold: float) -> Tuple[int, ...]:
    """Классы с nonconformity 1 − s/Σs ≤ порога."""
    total = scores.sum()
    if total <= 0:
        return ()
    nonconf = 1.0 - scores / total
    return tuple(int(c) for c in np.flatnonzero(nonconf <= threshold + TIE_EPS))


def fit_conformal_threshold(dev_scores: Sequence[np.ndarray], dev_labels: Sequence[int], lam: float = 0.1) -> float:
    """
    Эмпирический (1−λ)-квантиль nonconformity истинного класса на dev-cal
    с поправкой конечной выборки ⌈(n+1)(1−λ)⌉/n.
    """
    if not 0 < lam < 1:
        raise ValueError(f"Conformal: λ должно быть в (0,1), получено {lam}")
    nonconf = []
    for s, y in zip(dev_scores, dev_labels):
        s = np.asarray(s, dtype=float)
        total = s.sum()
        nonconf.append(1.0 - (s[y] / total if total > 0 and y < s.size else 0.0))
    if not nonconf:
        raise ValueError("Conformal: пустой dev-cal")
    n = len(nonconf)
    level = min(1.0, np.ceil((n + 1) * (1.0 - lam)) / n)
    return float(np.quantile(nonconf, level, method="higher"))


# ---------------------------------------------------------------------------------
# КОНСЕНСУС
# ---------------------------------------------------------------------------------

def _decide(answers: Sequence[int], weights: np.ndarray, delta: float, threshold: float,
            n_classes: Optional[int], abstain: bool) -> ConsensusResult:
    n = n_classes if n_classes is not None else int(max(answers)) + 1
    scores = class_scores(answers, weights, n)
    answer = int(np.argmax(scores))
    margin = normalized_margin(scores)
    cset = conformal_set(scores, threshold)
    answered = (margin >= delta and len(cset) == 1) if abstain else True
    return ConsensusResult(answer, margin, scores.tolist(), cset, bool(answered), weights.tolist())


def weighted_consensus(ballots: Sequence[RolloutBallot], delta: float, threshold: float = 0.5,
                       n_classes: Optional[int] = None) -> ConsensusResult:
    """
    s(a) = Σ_{j: a_j = a} w_j, â = argmax s, запас = top-2 разрыв / Σ s.
    Воздержание, если запас < δ или конформное множество не из одного класса.
    """
    if not ballots:
        return ConsensusResult(None, 0.0, [], (), False)
    w = ballot_weights(ballots)
    for b, wj in zip(ballots, w):
        b.weight = float(wj)
    return _decide([b.answer for b in ballots], w, delta, threshold, n_classes, abstain=True)


def vote_entropy(scores: np.ndarray) -> float:
    """Энтропия распределения голосов, нормированная на log C (0 — единогласие, 1 — равномерно)."""
    scores = np.asarray(scores, dtype=float)
    total = scores.sum()
    if total <= 0 or scores.size < 2:
        return 0.0
    p = scores[scores > 0] / total
    return float(-(p * np.log(p)).sum() / np.log(scores.size))


def hard_majority(answers: Sequence[int], n_classes: Optional[int] = None, threshold: float = 0.5,
                  delta: float = 0.0, max_entropy: Optional[float] = 0.2) -> ConsensusResult:
    """
    Большинство с равными весами. Отвечает только при низкоэнтропийном большинстве:
    энтропия голосов < max_entropy, плюс те же запас ≥ δ и |C| = 1, что у взвешенного.
    max_entropy=None — голое большинство без воздержания.
    """
    if len(answers) == 0:
        return ConsensusResult(None, 0.0, [], (), False)
    w = np.full(len(answers), 1.0 / len(answers))
    if max_entropy is None:
        return _decide(answers, w, 0.0, threshold, n_classes, abstain=False)
    result = _decide(answers, w, delta, threshold, n_classes, abstain=True)
    if result.answered and vote_entropy(np.asarray(result.scores)) >= max_entropy:
        result.answered = False
    return result


def flip_ballots(ballots: Sequence[RolloutBallot], fraction: float, n_classes: int,
                 rng: np.random.Generator) -> List[RolloutBallot]:
    """Стресс-тест: доля голосов заменяется случайным другим классом."""
    if fraction <= 0:
        return list(ballots)
    out = []
    for b in ballots:
        if rng.random() < fraction:
            other = (b.answer + 1 + int(rng.integers(0, n_classes - 1))) % n_classes
            b = RolloutBallot(other, b.entropy, b.confidence, b.visfid, b.reliability)
        out.append(b)
    return out


# ---------------------------------------------------------------------------------
# ЭКЗЕМПЛЯР
# ---------------------------------------------------------------------------------

def select_exemplar(lengths: Sequence[int], cur_coh: Sequence[float], visfid: Sequence[float],
                    eta: float, xi: float) -> Optional[int]:
    """
    argmin |τ| − η·(Cur + Coh) − ξ·VisFid среди успешных; ничья → короче, затем меньший индекс.
    Пустое множество → None (вызывающий обязан воздержаться).
    """
    if len(lengths) == 0:
        logger.info("Consensus: no successful rollouts, no exemplar")
        return None
    L = np.asarray(lengths, dtype=float)
    score = L - eta * np.asarray(cur_coh, dtype=float) - xi * np.asarray(visfid, dtype=float)
    best = np.flatnonzero(score <= score.min() + TIE_EPS)
    return int(min(best, key=lambda i: (L[i], i)))
