# src/policy/model.py

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from config import NoiseConfig
from policy.features import ActionSpace, FeatureLayout, featurize_state
from toyworld.scene import Clip, Query
from toyworld.tools import EpisodeState, Observation, ToolCall, run_call


# ---------------------------------------------------------------------------------
# ПАРАМЕТРЫ
# ---------------------------------------------------------------------------------

@dataclass
class PolicyParams:
    """Линейный softmax над алфавитом действий + голова ответа над уликами."""
    w_act: np.ndarray            # (D, A)
    w_ans: np.ndarray            # (D_ans, C)
    answer_index: np.ndarray     # какие признаки состояния идут в голову ответа
    temperature: float = 1.0

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.w_act.copy(), self.w_ans.copy(), self.answer_index.copy(), self.temperature)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.w_act).all() and np.isfinite(self.w_ans).all())

    def step(self, grad: "PolicyGrad", lr: float) -> "PolicyParams":
        """Шаг градиентного спуска: θ − lr·g."""
        return PolicyParams(self.w_act - lr * grad.w_act, self.w_ans - lr * grad.w_ans,
                            self.answer_index, self.temperature)


@dataclass
class PolicyGrad:
    w_act: np.ndarray
    w_ans: np.ndarray

    @staticmethod
    def zeros_like(params: PolicyParams) -> "PolicyGrad":
        return PolicyGrad(np.zeros_like(params.w_act), np.zeros_like(params.w_ans))

    def __add__(self, other: "PolicyGrad") -> "PolicyGrad":
        return PolicyGrad(self.w_act + other.w_act, self.w_ans + other.w_ans)

    def scale(self, c: float) -> "PolicyGrad":
        return PolicyGrad(self.w_act * c, self.w_ans * c)

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.w_act ** 2) + np.sum(self.w_ans ** 2)))

    def clipped(self, max_norm: float) -> "PolicyGrad":
        n = self.norm
        if max_norm > 0 and n > max_norm:
            return self.scale(max_norm / n)
        return self


def init_policy(layout: FeatureLayout, space: ActionSpace, n_answers: int,
                seed: int = 0, scale: float = 0.01, temperature: float = 1.0) -> PolicyParams:
    rng = np.random.default_rng(seed)
    return PolicyParams(
        w_act=rng.normal(0.0, scale, size=(layout.dim, space.size)),
        w_ans=rng.normal(0.0, scale, size=(layout.answer_dim, n_answers)),
        answer_index=layout.answer_index(),
        temperature=temperature,
    )


def action_distribution(params: PolicyParams, x: np.ndarray) -> np.ndarray:
    return softmax(x @ params.w_act / params.temperature, axis=-1)


def answer_distribution(params: PolicyParams, x_ans: np.ndarray) -> np.ndarray:
    return softmax(x_ans @ params.w_ans / params.temperature, axis=-1)


def entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


# ---------------------------------------------------------------------------------
# ТРАЕКТОРИЯ
# ---------------------------------------------------------------------------------

@dataclass
class TrajStep:
    features: np.ndarray
    action: int
    probs: np.ndarray
    logp: float
    call: Optional[ToolCall] = None
    obs: Optional[Observation] = None
    decisive: bool = False
    forced: bool = False

    @property
    def is_tool(self) -> bool:
        return self.obs is not None

    @property
    def valid_call(self) -> bool:
        return self.obs is None or self.obs.valid_call


@dataclass
class Trajectory:
    steps: List[TrajStep]
    answer: Optional[int] = None
    answer_features: Optional[np.ndarray] = None
    answer_probs: Optional[np.ndarray] = None
    answer_logp: float = 0.0
    query: Optional[Query] = None
    clip_id: str = ""
    seed: int = 0

    @property
    def total_logp(self) -> float:
        return float(sum(s.logp for s in self.steps) + self.answer_logp)

    @property
    def tool_steps(self) -> List[TrajStep]:
        return [s for s in self.steps if s.is_tool]

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def decisive_flags(self) -> List[bool]:
        return [s.decisive for s in self.steps]

    @property
    def n_decisive(self) -> int:
        return sum(self.decisive_flags)

    @property
    def n_invalid(self) -> int:
        return sum(1 for s in self.steps if not s.valid_call)

    @property
    def correct(self) -> bool:
        return self.query is not None and self.answer == self.query.answer

    def states(self) -> np.ndarray:
        return np.stack([s.features for s in self.steps])


def sample_trajectory(
    params: PolicyParams,
    clip: Clip,
    query: Query,
    max_steps: int,
    noise: NoiseConfig,
    rng: np.random.Generator,
    greedy: bool = False,
    space: Optional[ActionSpace] = None,
    layout: Optional[FeatureLayout] = None,
) -> Trajectory:
    """
    Авторегрессионный сэмплинг: невалидные вызовы исполняются как проваленные,
    на последнем шаге ANSWER принудительный (его logp = 0).
    """
    space = space or ActionSpace(clip.n_frames)
    layout = layout or FeatureLayout.for_world(clip.world)
    state = EpisodeState.start(clip)
    steps: List[TrajStep] = []

    for t in range(max(max_steps, 1)):
        x = featurize_state(state, query, t, max_steps, layout)
        probs = action_distribution(params, x)
        forced = t == max_steps - 1
        if forced:
            action = space.answer_index
        elif greedy:
            action = int(np.argmax(probs))
        else:
            action = int(rng.choice(space.size, p=probs))
        logp = 0.0 if forced else float(np.log(probs[action]))

        op, arg = space.decode(action)
        if op == "ANSWER":
            steps.append(TrajStep(x, action, probs, logp, decisive=True, forced=forced))
            break
        call = ToolCall(op, arg, t)
        state, obs, decisive = run_call(state, call, noise, rng)
        steps.append(TrajStep(x, action, probs, logp, call=call, obs=obs, decisive=decisive))

    x_ans = steps[-1].features[params.answer_index]
    q = answer_distribution(params, x_ans)
    answer = int(np.argmax(q)) if greedy else int(rng.choice(q.size, p=q))
    return Trajectory(
        steps=steps,
        answer=answer,
        answer_features=x_ans,
        answer_probs=q,
        answer_logp=float(np.log(q[answer])),
        query=query,
        clip_id=clip.clip_id,
    )


# ---------------------------------------------------------------------------------
# ОЦЕНКА ТРАЕКТОРИИ
# ---------------------------------------------------------------------------------

@dataclass
class TrajectoryScore:
    total_logp: float
    step_dists: List[np.ndarray]
    entropies: List[float]
    decisive_entropy: float
    answer_dist: Optional[np.ndarray] = None


def score_trajectory(params: PolicyParams, traj: Trajectory) -> TrajectoryScore:
    """Точный teacher-forced log π(τ); H_j — средняя энтропия на decisive шагах."""
    total = 0.0
    dists, ents = [], []
    for s in traj.steps:
        p = action_distribution(params, s.features)
        dists.append(p)
        ents.append(entropy(p))
        if not s.forced:
            total += float(np.log(p[s.action]))
    q = None
    if traj.answer is not None and traj.answer_features is not None:
        q = answer_distribution(params, traj.answer_features)
        total += float(np.log(q[traj.answer]))
    decisive = [e for e, s in zip(ents, traj.steps) if s.decisive]
    h = float(np.mean(decisive)) if decisive else (float(np.mean(ents)) if ents else 0.0)
    return TrajectoryScore(total, dists, ents, h, q)


def logprob_grad(params: PolicyParams, traj: Trajectory) -> PolicyGrad:
    """∇_θ log π(τ): для каждого шага x ⊗ (onehot(a) − p) / T."""
    g = PolicyGrad.zeros_like(params)
    T = params.temperature
    for s in traj.steps:
        if s.forced:
            continue
        p = action_distribution(params, s.features)
        delta = -p
        delta[s.action] += 1.0
        g.w_act += np.outer(s.features, delta) / T
    if traj.answer is not None and traj.answer_features is not None:
        q = answer_distribution(params, traj.answer_features)
        delta = -q
        delta[traj.answer] += 1.0
        g.w_ans += np.outer(traj.answer_features, delta) / T
    return g


# ---------------------------------------------------------------------------------
# KL НА УРОВНЕ ШАГОВ
# ---------------------------------------------------------------------------------

def _kl_rows(logits_p: np.ndarray, logits_q: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    lp = log_softmax(logits_p, axis=-1)
    lq = log_softmax(logits_q, axis=-1)
    p = np.exp(lp)
    kl = np.sum(p * (lp - lq), axis=-1)
    return kl, p, lp - lq


def step_kl(p: PolicyParams, q: PolicyParams, states: np.ndarray,
            answer_states: Optional[np.ndarray] = None) -> float:
    """Средний KL(π_p ‖ π_q) по состояниям (и позициям ответа, если переданы)."""
    states = np.atleast_2d(states)
    kl, _, _ = _kl_rows(states @ p.w_act / p.temperature, states @ q.w_act / q.temperature)
    parts = [kl]
    if answer_states is not None and len(answer_states):
        a = np.atleast_2d(answer_states)
        kla, _, _ = _kl_rows(a @ p.w_ans / p.temperature, a @ q.w_ans / q.temperature)
        parts.append(kla)
    allkl = np.concatenate(parts)
    return float(max(0.0, np.mean(allkl)))


def step_kl_grad(p: PolicyParams, q: PolicyParams, states: np.ndarray,
                 answer_states: Optional[np.ndarray] = None) -> PolicyGrad:
    """∇ по параметрам p среднего KL: dKL/dlogits = p ⊙ (log p − log q − KL)."""
    states = np.atleast_2d(states)
    n_a = 0 if answer_states is None else len(answer_states)
    n = states.shape[0] + n_a
    g = PolicyGrad.zeros_like(p)

    kl, probs, diff = _kl_rows(states @ p.w_act / p.temperature, states @ q.w_act / q.temperature)
    d_logits = probs * (diff - kl[:, None])
    g.w_act = states.T @ d_logits / (p.temperature * n)
    if n_a:
        a = np.atleast_2d(answer_states)
        kla, qa, diffa = _kl_rows(a @ p.w_ans / p.temperature, a @ q.w_ans / q.temperature)
        g.w_ans = a.T @ (qa * (diffa - kla[:, None])) / (p.temperature * n)
    return g


def trajectory_states(trajs: Sequence[Trajectory]) -> Tuple[np.ndarray, np.ndarray]:
    """Состояния действий и ответов пачки траекторий для KL-якоря."""
    states = np.concatenate([t.states() for t in trajs])
    answers = [t.answer_features for t in trajs if t.answer_features is not None]
    answer_states = np.stack(answers) if answers else np.zeros((0, 0))
    return states, answer_states


# ---------------------------------------------------------------------------------
# EMA-КОПИЯ
# ---------------------------------------------------------------------------------

@dataclass
class EmaPolicy:
    shadow: PolicyParams
    decay: float = 0.99
    frozen: bool = False


def ema_update(ema: EmaPolicy, live: PolicyParams) -> EmaPolicy:
    """shadow ← ρ·shadow + (1−ρ)·live, поэлементно."""
    if ema.shadow.w_act.shape != live.w_act.shape or ema.shadow.w_ans.shape != live.w_ans.shape:
        raise ValueError(
            f"EmaPolicy: формы не совпадают {ema.shadow.w_act.shape} vs {live.w_act.shape}"
        )
    if ema.frozen:
        return ema
    rho = ema.decay
    shadow = PolicyParams(
        rho * ema.shadow.w_act + (1.0 - rho) * live.w_act,
        rho * ema.shadow.w_ans + (1.0 - rho) * live.w_ans,
        ema.shadow.answer_index,
        ema.shadow.temperature,
    )
    return EmaPolicy(shadow=shadow, decay=rho, frozen=ema.frozen)
