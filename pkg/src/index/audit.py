# src/index/audit.py

from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.stats import beta

from config import IndexConfig
from index.dedup import Media, dedup_pair, hamming
from utils.logger import get_logger

logger = get_logger("pixelsoul-index")


def clopper_pearson(k: int, n: int, level: float = 0.95) -> Tuple[float, float]:
    """Точный биномиальный интервал для k успехов из n."""
    if n <= 0:
        raise ValueError("clopper_pearson: n должно быть > 0")
    if not 0 <= k <= n:
        raise ValueError(f"clopper_pearson: k={k} вне [0, {n}]")
    a = 1.0 - level
    low = 0.0 if k == 0 else float(beta.ppf(a / 2, k, n - k + 1))
    high = 1.0 if k == n else float(beta.ppf(1 - a / 2, k + 1, n - k))
    return low, high


@dataclass
class LeakageReport:
    exact_overlaps: int
    near_duplicates: int
    inspected: int
    confirmed: int
    rate: float
    ci_low: float
    ci_high: float
    pairs: List[Dict[str, object]]

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    def to_text(self) -> str:
        return (
            f"exact overlaps: {self.exact_overlaps}\n"
            f"near-duplicate candidates: {self.near_duplicates}\n"
            f"inspected: {self.inspected}, confirmed: {self.confirmed}\n"
            f"leak rate: {self.rate:.4f} [{self.ci_low:.4f}, {self.ci_high:.4f}] (95% CP)\n"
        )


def _mean_cosine(a: Media, b: Media) -> float:
    n = min(len(a.embeddings), len(b.embeddings))
    return float(np.mean(np.sum(a.embeddings[:n] * b.embeddings[:n], axis=1)))


def audit_leakage(
    stored: Sequence[Media],
    eval_media: Sequence[Media],
    cfg: IndexConfig,
    sample: int = 0,
) -> LeakageReport:
    """
    Аудит утечки оценочных медиа в индекс:
    точные совпадения (id или все pHash равны), кандидаты-дубликаты по правилу dedup,
    и ручной разбор top-n самых похожих пар с интервалом Клоппера–Пирсона.
    """
    n_inspect = sample or cfg.audit_sample
    stored_ids = {m.media_id for m in stored}
    exact = 0
    near = 0
    scored: List[Tuple[float, str, str, bool]] = []
    for ev in eval_media:
        if ev.media_id in stored_ids:
            exact += 1
        for item in stored:
            if item.is_clip != ev.is_clip:
                continue
            if len(item.hashes) == len(ev.hashes) and all(hamming(x, y) == 0 for x, y in zip(item.hashes, ev.hashes)):
                exact += 1
            verdict = dedup_pair(ev, item, cfg)
            near += int(verdict.duplicate)
            scored.append((_mean_cosine(ev, item), ev.media_id, item.media_id, verdict.duplicate))

    # самые похожие пары первыми; при равенстве — по id
    scored.sort(key=lambda t: (-t[0], t[1], t[2]))
    top = scored[:n_inspect]
    if not top:
        raise ValueError("audit_leakage: нет пар для разбора")
    confirmed = sum(int(t[3]) for t in top)
    low, high = clopper_pearson(confirmed, len(top))
    report = LeakageReport(
        exact_overlaps=exact,
        near_duplicates=near,
        inspected=len(top),
        confirmed=confirmed,
        rate=confirmed / len(top),
        ci_low=low,
        ci_high=high,
        pairs=[{"eval": e, "stored": s, "cosine": round(c, 6), "duplicate": d} for c, e, s, d in top],
    )
    logger.info(f"Audit: exact={exact} near={near} confirmed={confirmed}/{len(top)}")
    return report
