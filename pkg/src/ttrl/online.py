# src/ttrl/online.py

import dataclasses
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ccrft.pid import corridor_fraction
from config import NoiseConfig, TtrlConfig, WorldConfig
from metrics.process import acceptance_per_1k
from metrics.selective import Decision
from policy.model import PolicyParams, sample_trajectory
from toyworld.scene import Clip, Query, make_split
from ttrl.loop import TtrlContext, TtrlState, ttrl_step
from utils.logger import get_logger
from utils.seeding import make_rng

logger = get_logger("pixelsoul-ttrl")

StreamItem = Tuple[Clip, Query]


# ---------------------------------------------------------------------------------
# PROBE-СПЛИТ
# ---------------------------------------------------------------------------------

def shifted_world(world: WorldConfig, cfg: TtrlConfig) -> WorldConfig:
    """Сдвиг освещения и скорости для замороженного probe-сплита."""
    return dataclasses.replace(
        world,
        brightness_shift=min(cfg.probe_brightness, world.brightness_levels - 1),
        velocity_shift=cfg.probe_velocity,
    )


def make_probe_split(world: WorldConfig, n: int, seed: int, cfg: TtrlConfig) -> List[StreamItem]:
    return make_split(shifted_world(world, cfg), n, seed, "probe")


def probe_accuracy(policy: PolicyParams, probe: Sequence[StreamItem], max_steps: int,
                   noise: NoiseConfig, seed: int = 0) -> float:
    """Жадное декодирование с фиксированным потоком шума на каждый probe-запрос."""
    if not probe:
        return float("nan")
    hits = [
        sample_trajectory(policy, clip, query, max_steps, noise, make_rng(seed, "probe-eval", i), greedy=True).correct
        for i, (clip, query) in enumerate(probe)
    ]
    return float(np.mean(hits))


# ---------------------------------------------------------------------------------
# ОНЛАЙН-ПРОГОН
# ---------------------------------------------------------------------------------

@dataclass
class RunReport:
    variant: str
    steps: int
    accepted: int
    abstained: int
    pre_accuracy: float
    post_accuracy: float
    acceptance_rate: float
    abstention_rate: float
    kl_p50: float
    kl_p95: float
    accepted_per_1k: float
    corridor_fraction: float
    accuracy_series: List[Tuple[int, float]] = field(default_factory=list)
    kl_series: List[float] = field(default_factory=list)
    decisions: List[Decision] = field(default_factory=list)
    records: List[Dict[str, Any]] = field(default_factory=list)

    def summary(self) -> Dict[str, Any]:
        """Таблица метрик без построчных записей."""
        out = dataclasses.asdict(self)
        for heavy in ("decisions", "records", "kl_series"):
            out.pop(heavy)
        out["accuracy_series"] = [list(p) for p in self.accuracy_series]
        return out


def run_online(
    state: TtrlState,
    stream: Sequence[StreamItem],
    probe: Sequence[StreamItem],
    ctx: TtrlContext,
    cfg: TtrlConfig,
    budget: Optional[int] = None,
    seed: int = 0,
    on_record: Optional[Callable[[Dict[str, Any]], None]] = None,
) -> Tuple[TtrlState, RunReport]:
    """
    ttrl_step по потоку до исчерпания бюджета. Шаг засчитывается, когда запрос
    прошёл поиск, сэмплинг и голосование. Точность до/после — на замороженном probe.
    """
    if not stream:
        raise ValueError("TTRL: пустой поток запросов")
    n_steps = len(stream) if budget is None else max(0, int(budget))
    pre = probe_accuracy(state.policy, probe, cfg.max_steps, ctx.noise, seed)
    logger.info(f"TTRL {cfg.variant}: start steps={n_steps} probe={len(probe)} pre_acc={pre:.3f}")

    records: List[Dict[str, Any]] = []
    decisions: List[Decision] = []
    kl_series: List[float] = []
    accuracy_series: List[Tuple[int, float]] = [(0, pre)]
    items = itertools.islice(itertools.cycle(stream), n_steps)
    for i, (clip, query) in enumerate(items):
        state, rep = ttrl_step(state, clip, query, ctx, cfg, make_rng(seed, "ttrl", i))
        rec = rep.to_record()
        rec["seed"] = seed
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        decisions.append(Decision(
            margin=rep.consensus["margin"],
            singleton=len(rep.consensus["conformal_set"]) == 1,
            correct=rep.correct,
        ))
        kl_series.append(rep.kl)
        if (i + 1) % cfg.eval_every == 0:
            acc = probe_accuracy(state.policy, probe, cfg.max_steps, ctx.noise, seed)
            accuracy_series.append((i + 1, acc))
            logger.info(f"TTRL step={i + 1} acc={acc:.3f} kl={rep.kl:.4f} beta={rep.beta:.4f} "
                        f"accepted={state.accepted}")

    post = probe_accuracy(state.policy, probe, cfg.max_steps, ctx.noise, seed) if n_steps else pre
    if n_steps and accuracy_series[-1][0] != n_steps:
        accuracy_series.append((n_steps, post))
    accepted = sum(1 for r in records if r["accepted"])
    burn_in = min(state.pid.warmup, len(kl_series) // 2) if state.pid is not None else 0
    kl = np.asarray(kl_series) if kl_series else np.zeros(1)
    report = RunReport(
        variant=cfg.variant,
        steps=n_steps,
        accepted=accepted,
        abstained=n_steps - accepted,
        pre_accuracy=pre,
        post_accuracy=post,
        acceptance_rate=accepted / n_steps if n_steps else 0.0,
        abstention_rate=(n_steps - accepted) / n_steps if n_steps else 0.0,
        kl_p50=float(np.percentile(kl, 50)),
        kl_p95=float(np.percentile(kl, 95)),
        accepted_per_1k=acceptance_per_1k(accepted, n_steps),
        corridor_fraction=corridor_fraction(kl_series, cfg.corridor_min, cfg.corridor_max, burn_in),
        accuracy_series=accuracy_series,
        kl_series=kl_series,
        decisions=decisions,
        records=records,
    )
    logger.info(f"TTRL {cfg.variant}: done acc {pre:.3f} → {post:.3f}, accepted {accepted}/{n_steps}, "
                f"KL p50={report.kl_p50:.4f} p95={report.kl_p95:.4f}")
    return state, report
