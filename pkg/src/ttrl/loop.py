# src/ttrl/loop.py

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ccrft.pid import PidState, kl_trust_step, pid_step
from config import (
    ConsensusConfig, DynamicsConfig, IndexConfig, NoiseConfig, PidConfig, RcprConfig, TtrlConfig,
)
from consensus.calibration import Calibrator
from consensus.dawid_skene import MISSING, ds_em
from consensus.voting import RolloutBallot, flip_ballots, hard_majority, select_exemplar, weighted_consensus
from index.ivfpq import IvfPqIndex
from index.keys import HybridKey, build_keys
from metrics.fidelity import decisive_observations, pseudo_references, visfid
from metrics.process import tool_step_embeddings
from percept.dynamics import DynamicsHead, curiosity_batch
from percept.encoder import FrozenEncoder, trajectory_pairs, transition_rows
from percept.zstats import ZStats, coherence_reward
from policy.model import (
    EmaPolicy, PolicyParams, Trajectory, ema_update, sample_trajectory, score_trajectory, step_kl,
    trajectory_states,
)
from toyworld.scene import Clip, Query
from ttrl.objective import (
    NEUTRAL_VALUE, advantages, baseline_update, mean_value, neighborhood_value_update, ttrl_objective,
    ttrl_reward, value_summary,
)
from utils.errors import TrainingError
from utils.logger import get_logger

logger = get_logger("pixelsoul-ttrl")


# ---------------------------------------------------------------------------------
# СОСТОЯНИЕ И КОНТЕКСТ
# ---------------------------------------------------------------------------------

@dataclass
class TtrlState:
    """Всё, что меняется от шага к шагу: политика, EMA-якорь, PID, ценности окрестностей."""
    policy: PolicyParams
    ema: EmaPolicy
    pid: Optional[PidState]
    values: Dict[str, float] = field(default_factory=dict)
    baselines: Dict[str, float] = field(default_factory=dict)
    window: List[List[int]] = field(default_factory=list)
    step: int = 0
    accepted: int = 0

    @staticmethod
    def start(policy: PolicyParams, cfg: TtrlConfig, pid_cfg: Optional[PidConfig] = None) -> "TtrlState":
        """no_safety: β ≡ 0 и замороженный якорь; остальные варианты под PID."""
        controlled = cfg.variant != "no_safety"
        ema = EmaPolicy(policy.copy(), decay=cfg.ema_decay, frozen=not controlled)
        pid = PidState.from_config(pid_cfg or PidConfig(), cfg.beta_init) if controlled else None
        return TtrlState(policy.copy(), ema, pid)


@dataclass
class TtrlContext:
    """Неизменяемые на шаге ресурсы; индекс и память экземпляров растут только при принятых обновлениях."""
    index: IvfPqIndex
    key_encoder: FrozenEncoder
    step_encoder: FrozenEncoder
    index_cfg: IndexConfig = field(default_factory=IndexConfig)
    rcpr: RcprConfig = field(default_factory=RcprConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    calibrator: Calibrator = field(default_factory=Calibrator)
    zstats: Dict[str, ZStats] = field(default_factory=dict)
    dynamics: Optional[DynamicsHead] = None
    dynamics_cfg: DynamicsConfig = field(default_factory=DynamicsConfig)
    memory: Dict[str, Trajectory] = field(default_factory=dict)
    conformal_threshold: Optional[float] = None
    grow_index: bool = True

    def stats(self, family: str) -> ZStats:
        return self.zstats.get(family) or ZStats(family, 0.0, 1.0)


@dataclass
class Neighborhood:
    key: HybridKey
    neighbor_ids: List[str]
    similarities: List[float]
    v_bar: float
    baseline: float

    @property
    def empty(self) -> bool:
        return not self.neighbor_ids


@dataclass
class StepReport:
    step: int
    query_id: str
    clip_id: str
    kind: str
    neighbors: List[str]
    similarities: List[float]
    n_rollouts: int
    kept: List[int]
    consensus: Dict[str, Any]
    exemplar: Optional[int]
    rewards: List[float]
    advantages: List[float]
    mask: float
    v_bar: float
    baseline: float
    beta: float
    kl: float
    loss: float
    grad_norm: float
    accepted: bool
    correct: bool
    step_scale: float = 1.0

    def to_record(self) -> Dict[str, Any]:
        return asdict(self)


# ---------------------------------------------------------------------------------
# ШАГИ ЦИКЛА
# ---------------------------------------------------------------------------------

def retrieve(state: TtrlState, ctx: TtrlContext, clip: Clip, query: Query, cfg: TtrlConfig) -> Neighborhood:
    key = build_keys(clip, query, [], ctx.key_encoder, ctx.index_cfg, source_id=query.query_id)
    if len(ctx.index) == 0:
        logger.warning(f"TTRL: empty index, neighborhood of {query.query_id} is empty (v̄ = b = 1)")
        return Neighborhood(key, [], [], NEUTRAL_VALUE, NEUTRAL_VALUE)
    found = ctx.index.search(key, cfg.lambda_pix, cfg.neighbors)
    ids = [nb.id for nb in found]
    return Neighborhood(
        key, ids, [nb.score for nb in found],
        mean_value(state.values, ids),
        state.baselines.get(query.kind, NEUTRAL_VALUE),
    )


def stepwise_iou(a: Trajectory, b: Trajectory) -> float:
    """Средний по позициям IoU следов инструментальных шагов; нет шагов → 0."""
    fa = [s.obs.footprint for s in a.tool_steps]
    fb = [s.obs.footprint for s in b.tool_steps]
    n = max(len(fa), len(fb))
    if not fa or not fb:
        return 0.0
    return float(sum(x.iou(y) for x, y in zip(fa, fb)) / n)


def dedup_rollouts(trajs: Sequence[Trajectory], threshold: float) -> List[int]:
    """Жадно по порядку: роллаут отбрасывается, если похож на уже оставленный сильнее порога."""
    kept: List[int] = []
    for j, t in enumerate(trajs):
        if all(stepwise_iou(trajs[i], t) <= threshold for i in kept):
            kept.append(j)
    return kept


def ds_reliabilities(window: Sequence[Sequence[int]], n_annotators: int, n_classes: int,
                     cfg: ConsensusConfig) -> np.ndarray:
    """Надёжности слотов роллаутов по Dawid–Skene на скользящем окне; мало данных → единицы."""
    if len(window) < 2:
        return np.ones(n_annotators)
    ballots = np.asarray(window, dtype=int)
    observed = ballots[ballots != MISSING]
    if observed.size == 0 or np.all(observed == observed[0]):
        return np.ones(n_annotators)
    try:
        model = ds_em(ballots, n_classes, cfg)
    except ValueError as e:
        logger.warning(f"TTRL: Dawid-Skene skipped ({e})")
        return np.ones(n_annotators)
    if model.degenerate:
        return np.ones(n_annotators)
    return model.reliabilities


def cur_coh(ctx: TtrlContext, clip: Clip, traj: Trajectory, rng: np.random.Generator) -> float:
    """Cur + Coh траектории: любопытство головы динамики и когерентность на замороженном энкодере."""
    kind = traj.query.kind if traj.query is not None else ""
    coh = coherence_reward(tool_step_embeddings(traj, clip, ctx.step_encoder), ctx.stats(kind))
    cur = 0.0
    if ctx.dynamics is not None:
        X, Y, _ = transition_rows(clip, trajectory_pairs(traj))
        cur = float(np.sum(curiosity_batch(ctx.dynamics, X, Y, rng, ctx.dynamics_cfg)))
    return cur + coh


def _confidence(cal: Calibrator, traj: Trajectory) -> float:
    logits = np.log(np.clip(traj.answer_probs, 1e-12, None))
    return cal.confidence(logits, traj.answer)


# ---------------------------------------------------------------------------------
# ШАГ TTRL
# ---------------------------------------------------------------------------------

def ttrl_step(
    state: TtrlState,
    clip: Clip,
    query: Query,
    ctx: TtrlContext,
    cfg: TtrlConfig,
    rng: np.random.Generator,
) -> Tuple[TtrlState, StepReport]:
    """
    Шаги онлайн-цикла: окрестность, N роллаутов, отсев дублей,
    сигналы голосов, консенсус с воздержанием, экземпляр, маскированная цель с KL к EMA,
    растяжение шага под целевой KL к EMA, обновление EMA/PID/ценностей.
    """
    n_classes = clip.world.n_answers
    hood = retrieve(state, ctx, clip, query, cfg)

    trajs = [sample_trajectory(state.policy, clip, query, cfg.max_steps, ctx.noise, rng)
             for _ in range(cfg.n_rollouts)]
    kept = dedup_rollouts(trajs, cfg.dedup_iou)
    pool = [trajs[i] for i in kept]

    # сигналы голосов
    plurality = int(np.bincount([t.answer for t in pool], minlength=n_classes).argmax())
    neighbor_refs = [
        o for h in hood.neighbor_ids
        if h in ctx.memory and ctx.memory[h].clip_id == clip.clip_id
        for o in decisive_observations(ctx.memory[h]) if o.success
    ]
    row = [MISSING] * cfg.n_rollouts
    for j in kept:
        row[j] = int(trajs[j].answer)
    window = (state.window + [row])[-cfg.ds_window:]
    rel = ds_reliabilities(window, cfg.n_rollouts, n_classes, ctx.consensus)

    ballots = []
    for j, t in zip(kept, pool):
        refs = pseudo_references(pool, exclude=kept.index(j), answer=plurality) + neighbor_refs
        ballots.append(RolloutBallot(
            answer=int(t.answer),
            entropy=score_trajectory(state.policy, t).decisive_entropy,
            confidence=_confidence(ctx.calibrator, t),
            visfid=visfid(t, refs),
            reliability=float(rel[j]),
        ))
    ballots = flip_ballots(ballots, cfg.adversarial_flip, n_classes, rng)

    # консенсус
    threshold = ctx.conformal_threshold if ctx.conformal_threshold is not None else ctx.consensus.conformal_threshold
    if cfg.variant == "hard_majority":
        result = hard_majority([b.answer for b in ballots], n_classes, threshold, cfg.delta,
                               ctx.consensus.majority_entropy)
    else:
        result = weighted_consensus(ballots, cfg.delta, threshold, n_classes)

    # экземпляр среди согласных с â
    agree = [i for i, b in enumerate(ballots) if b.answer == result.answer]
    scores = [cur_coh(ctx, clip, pool[i], rng) for i in agree]
    pick = select_exemplar([pool[i].length for i in agree], scores, [ballots[i].visfid for i in agree],
                           cfg.eta, cfg.xi)
    exemplar = pool[agree[pick]] if pick is not None else None
    answered = bool(result.answered and exemplar is not None)
    if result.answered and exemplar is None:
        logger.info(f"TTRL: {query.query_id} has no successful rollout, forced abstention")
    result.answered = answered
    result.exemplar = kept[agree[pick]] if pick is not None else None
    mask = 1.0 if answered else 0.0

    # цель и шаг
    if result.answer is not None:
        rewards = [ttrl_reward(t, result.answer, exemplar, cfg.kappa, cfg.lambda_pen, ctx.rcpr) for t in pool]
    else:
        rewards = [0.0] * len(pool)
    adv = advantages(rewards, hood.v_bar, hood.baseline, cfg.objective)
    beta = state.pid.beta if state.pid is not None else 0.0
    loss, grad = ttrl_objective(state.policy, state.ema.shadow, pool, adv, mask, beta)
    grad_norm = grad.norm
    if not np.isfinite(loss) or not np.isfinite(grad_norm):
        raise TrainingError("TTRL: loss разошёлся", {"step": state.step, "loss": loss, "beta": beta,
                                                     "query": query.query_id})
    policy = state.policy.step(grad.clipped(cfg.grad_clip), cfg.lr)

    states, answer_states = trajectory_states(pool)
    scale = 1.0
    if state.pid is not None and state.pid.trust_scale > 0:
        policy, scale = kl_trust_step(policy, state.ema.shadow, states, answer_states,
                                      cfg.corridor_target, state.pid.trust_scale)
    kl = step_kl(policy, state.ema.shadow, states, answer_states)
    ema = ema_update(state.ema, policy)
    pid = state.pid
    if pid is not None and not pid.saturated(scale):
        pid, _ = pid_step(pid, kl, cfg.corridor_target)

    values, baselines, accepted = state.values, dict(state.baselines), state.accepted
    if answered:
        summary = value_summary(scores[pick])
        values = neighborhood_value_update(state.values, hood.neighbor_ids, summary, cfg.value_decay)
        baselines[query.kind] = baseline_update(hood.baseline, hood.v_bar, cfg.value_decay)
        accepted += 1
        if ctx.grow_index:
            steps = exemplar.tool_steps
            key = build_keys(clip, query, [s.obs for s in steps], ctx.key_encoder, ctx.index_cfg,
                             calls=[s.call for s in steps], source_id=query.query_id)
            if ctx.index.add(key):
                ctx.memory[query.query_id] = exemplar

    report = StepReport(
        step=state.step,
        query_id=query.query_id,
        clip_id=clip.clip_id,
        kind=query.kind,
        neighbors=hood.neighbor_ids,
        similarities=[float(s) for s in hood.similarities],
        n_rollouts=len(trajs),
        kept=kept,
        consensus=result.to_record(ballots),
        exemplar=result.exemplar,
        rewards=[float(r) for r in rewards],
        advantages=[float(a) for a in adv],
        mask=mask,
        v_bar=float(hood.v_bar),
        baseline=float(hood.baseline),
        beta=float(beta),
        kl=float(kl),
        loss=float(loss),
        grad_norm=float(grad_norm),
        accepted=answered,
        correct=result.answer == query.answer,
        step_scale=float(scale),
    )
    new_state = TtrlState(policy, ema, pid, values, baselines, window, state.step + 1, accepted)
    return new_state, report
