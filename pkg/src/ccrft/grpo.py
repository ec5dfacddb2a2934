# src/ccrft/grpo.py

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from ccrft.pid import PidState, kl_trust_step, pid_step
from ccrft.reward import RewardBreakdown, batch_curiosity, breakdowns_summary, l2_smooth_prior, reward_breakdown
from config import DynamicsConfig, NoiseConfig, PidConfig, RewardWeights, RftConfig
from percept.dynamics import DynamicsHead, curiosity_batch
from percept.embedding import Projector, embed_inputs, projector_vjp
from percept.encoder import step_inputs, trajectory_pairs, transition_rows
from percept.zstats import ZStats, coherence_reward
from policy.model import (
    PolicyGrad, PolicyParams, Trajectory, logprob_grad, sample_trajectory, score_trajectory,
    step_kl, step_kl_grad, trajectory_states,
)
from toyworld.scene import Clip, Query
from utils.errors import TrainingError
from utils.logger import get_logger
from utils.seeding import make_rng

logger = get_logger("pixelsoul-rft")

ADV_EPS = 1e-8

Prompt = Tuple[str, Query]


class RolloutEnv(Protocol):
    def rollout_group(self, policy: PolicyParams, prompt: Any, k: int,
                      rng: np.random.Generator) -> Tuple[List[Trajectory], np.ndarray]:
        ...


# ---------------------------------------------------------------------------------
# ПРЕИМУЩЕСТВА
# ---------------------------------------------------------------------------------

def group_advantages(rewards: Sequence[float], eps: float = ADV_EPS) -> np.ndarray:
    """A_i = (R_i − mean)/(std + ε) внутри группы; нулевой разброс → нули."""
    r = np.asarray(rewards, dtype=float)
    std = r.std()
    if std == 0:
        logger.warning(f"GRPO: group of {len(r)} has zero reward std, advantages set to 0")
        return np.zeros_like(r)
    return (r - r.mean()) / (std + eps)


def normalize_batch(adv: np.ndarray) -> np.ndarray:
    """Деление на RMS по пачке, без сдвига среднего."""
    rms = float(np.sqrt(np.mean(adv ** 2))) if adv.size else 0.0
    return adv / rms if rms > 0 else adv


def grpo_objective(params: PolicyParams, anchor: PolicyParams, trajs: Sequence[Trajectory],
                   advantages: np.ndarray, beta: float) -> Tuple[float, PolicyGrad]:
    """loss = −mean_i A_i·log π(τ_i) + β·KL_step(π ‖ π_SFT); возвращает (loss, ∇loss)."""
    n = max(len(trajs), 1)
    loss = 0.0
    grad = PolicyGrad.zeros_like(params)
    for a, traj in zip(advantages, trajs):
        if a == 0:
            continue
        loss -= a * score_trajectory(params, traj).total_logp / n
        grad = grad + logprob_grad(params, traj).scale(-a / n)
    if beta > 0 and trajs:
        states, answer_states = trajectory_states(trajs)
        loss += beta * step_kl(params, anchor, states, answer_states)
        grad = grad + step_kl_grad(params, anchor, states, answer_states).scale(beta)
    return float(loss), grad


# ---------------------------------------------------------------------------------
# ШАГ GRPO
# ---------------------------------------------------------------------------------

def grpo_update(
    policy: PolicyParams,
    anchor: PolicyParams,
    prompts: Sequence[Any],
    k: int,
    pid: Optional[PidState],
    cfg: RftConfig,
    env: RolloutEnv,
    rng: np.random.Generator,
) -> Tuple[PolicyParams, Optional[PidState], Dict[str, Any]]:
    """
    Группа из K траекторий на каждый prompt, групповые преимущества,
    нормировка по пачке, шаг с клиппингом, растяжение шага под целевой KL к якорю,
    замер KL и шаг PID. pid=None означает β ≡ 0 и шаг без ограничения KL.
    """
    if k < 2:
        raise ValueError(f"GRPO: нужно K ≥ 2, получено {k}")
    trajs: List[Trajectory] = []
    advs: List[np.ndarray] = []
    rewards_all: List[float] = []
    zero_groups = 0
    for prompt in prompts:
        group, rewards = env.rollout_group(policy, prompt, k, rng)
        adv = group_advantages(rewards)
        if not adv.any():
            zero_groups += 1
        trajs.extend(group)
        advs.append(adv)
        rewards_all.extend(float(r) for r in rewards)

    A = normalize_batch(np.concatenate(advs)) if advs else np.zeros(0)
    beta = pid.beta if pid is not None else 0.0
    loss, grad = grpo_objective(policy, anchor, trajs, A, beta)
    grad_norm = grad.norm
    if not np.isfinite(loss) or not np.isfinite(grad_norm):
        raise TrainingError("GRPO: loss разошёлся", {"loss": loss, "grad_norm": grad_norm, "beta": beta})
    new_policy = policy.step(grad.clipped(cfg.grad_clip), cfg.lr)

    states, answer_states = trajectory_states(trajs)
    scale = 1.0
    if pid is not None and pid.trust_scale > 0:
        new_policy, scale = kl_trust_step(new_policy, anchor, states, answer_states, cfg.kl_target, pid.trust_scale)
    kl = step_kl(new_policy, anchor, states, answer_states)
    if pid is not None and not pid.saturated(scale):
        pid, beta = pid_step(pid, kl, cfg.kl_target)

    if cfg.projector_lr > 0 and hasattr(env, "align_projector"):
        env.align_projector(trajs, A, cfg.projector_lr)

    stats = {
        "mean_reward": float(np.mean(rewards_all)) if rewards_all else 0.0,
        "accuracy": float(np.mean([t.correct for t in trajs])) if trajs else 0.0,
        "zero_std_groups": zero_groups,
        "loss": loss,
        "kl": kl,
        "beta": beta,
        "grad_norm": grad_norm,
        "step_scale": scale,
    }
    return new_policy, pid, stats


# ---------------------------------------------------------------------------------
# СРЕДА RFT НАД TOYWORLD
# ---------------------------------------------------------------------------------

@dataclass
class RftEnvironment:
    """Роллауты на клипах toyworld с наградой R = w1·final + w2·cur + w3·coh − w4·pen."""
    clips: Dict[str, Clip]
    weights: RewardWeights
    noise: NoiseConfig
    max_steps: int
    projector: Projector
    zstats: Dict[str, ZStats] = field(default_factory=dict)
    dynamics: Optional[DynamicsHead] = None
    dynamics_cfg: DynamicsConfig = field(default_factory=DynamicsConfig)
    last_breakdowns: List[RewardBreakdown] = field(default_factory=list)

    def _stats(self, family: str) -> ZStats:
        stats = self.zstats.get(family)
        if stats is None:
            logger.warning(f"RFT: no z-stats for family {family!r}, using mean=0 std=1")
            stats = ZStats(family, 0.0, 1.0)
            self.zstats[family] = stats
        return stats

    def step_curiosities(self, clip: Clip, trajs: Sequence[Trajectory], rng: np.random.Generator) -> List[np.ndarray]:
        rows = [transition_rows(clip, trajectory_pairs(t)) for t in trajs]
        if self.dynamics is None or self.weights.w2 == 0:
            return [np.zeros(len(r[0])) for r in rows]
        X = np.concatenate([r[0] for r in rows])
        Y = np.concatenate([r[1] for r in rows])
        flat = curiosity_batch(self.dynamics, X, Y, rng, self.dynamics_cfg)
        out, pos = [], 0
        for r in rows:
            out.append(flat[pos:pos + len(r[0])])
            pos += len(r[0])
        return out

    def coherence(self, clip: Clip, traj: Trajectory, family: str) -> float:
        if self.weights.coherence_prior == "l2_smooth":
            return l2_smooth_prior([s.call for s in traj.tool_steps], clip)
        rows = step_inputs(clip, trajectory_pairs(traj))
        E, _ = embed_inputs(self.projector, rows)
        return coherence_reward(E, self._stats(family))

    def score_group(self, clip: Clip, query: Query, trajs: Sequence[Trajectory],
                    rng: np.random.Generator) -> np.ndarray:
        cur = batch_curiosity(self.step_curiosities(clip, trajs, rng), self.weights.curiosity_zscore)
        items = []
        for t, c in zip(trajs, cur):
            coh = self.coherence(clip, t, query.kind) if self.weights.w3 > 0 else 0.0
            items.append(reward_breakdown(t.correct, t.n_invalid, t.length, float(c), coh, self.weights))
        self.last_breakdowns.extend(items)
        return np.array([b.total for b in items])

    def rollout_group(self, policy: PolicyParams, prompt: Prompt, k: int,
                      rng: np.random.Generator) -> Tuple[List[Trajectory], np.ndarray]:
        clip_id, query = prompt
        clip = self.clips[clip_id]
        trajs = [sample_trajectory(policy, clip, query, self.max_steps, self.noise, rng) for _ in range(k)]
        return trajs, self.score_group(clip, query, trajs, rng)

    def align_projector(self, trajs: Sequence[Trajectory], advantages: np.ndarray, lr: float) -> None:
        """Подъём по Σ A_i·w3·R_coh(τ_i); градиент идёт только в параметры проектора."""
        if self.weights.coherence_prior != "cosine" or self.weights.w3 == 0:
            return
        proj = self.projector
        total_w = [np.zeros_like(w) for w in proj.mlp.weights]
        total_b = [np.zeros_like(b) for b in proj.mlp.biases]
        n = max(len(trajs), 1)
        for a, traj in zip(advantages, trajs):
            if a == 0 or traj.length < 2 or traj.query is None:
                continue
            clip = self.clips[traj.clip_id]
            E, cache = embed_inputs(proj, step_inputs(clip, trajectory_pairs(traj)))
            sigma = self._stats(traj.query.kind).std
            d_E = np.zeros_like(E)
            d_E[1:] += E[:-1]
            d_E[:-1] += E[1:]
            d_w, d_b = projector_vjp(proj, cache, d_E * (a * self.weights.w3 / (sigma * n)))
            total_w = [t + g for t, g in zip(total_w, d_w)]
            total_b = [t + g for t, g in zip(total_b, d_b)]
        # подъём: шаг против знака
        self.projector = Projector(proj.mlp.step([-g for g in total_w], [-g for g in total_b], lr), proj.layernorm)


# ---------------------------------------------------------------------------------
# ЦИКЛ ФАЗЫ 2
# ---------------------------------------------------------------------------------

@dataclass
class RftResult:
    params: PolicyParams
    pid: Optional[PidState]
    records: List[Dict[str, Any]]


def rft_train(
    policy: PolicyParams,
    anchor: PolicyParams,
    env: RolloutEnv,
    prompts: Sequence[Any],
    cfg: RftConfig,
    pid_cfg: Optional[PidConfig] = None,
    seed: int = 0,
    use_anchor: bool = True,
) -> RftResult:
    """cfg.updates шагов GRPO; каждая запись лога — одна строка для графика коридора."""
    if not prompts:
        raise TrainingError("RFT: нет промптов")
    rng = make_rng(seed, "rft")
    pid = PidState.from_config(pid_cfg or PidConfig(), cfg.beta_init) if use_anchor else None
    records: List[Dict[str, Any]] = []
    for step in range(cfg.updates):
        idx = rng.choice(len(prompts), size=min(cfg.prompts_per_update, len(prompts)), replace=False)
        batch = [prompts[i] for i in idx]
        if isinstance(env, RftEnvironment):
            env.last_breakdowns = []
        policy, pid, stats = grpo_update(policy, anchor, batch, cfg.group_size, pid, cfg, env, rng)
        stats["step"] = step
        if isinstance(env, RftEnvironment):
            stats.update({f"r_{k}": v for k, v in breakdowns_summary(env.last_breakdowns).items()})
        records.append(stats)
        if step % 20 == 0:
            logger.info(f"RFT step={step} reward={stats['mean_reward']:.3f} kl={stats['kl']:.4f} beta={stats['beta']:.4f}")
    return RftResult(policy, pid, records)
