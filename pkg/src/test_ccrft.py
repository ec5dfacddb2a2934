# src/test_ccrft.py

import numpy as np
import pytest

from ccrft.grpo import (
    RftEnvironment, group_advantages, grpo_objective, grpo_update, normalize_batch, rft_train,
)
from ccrft.pid import PidState, corridor_fraction, interpolate, kl_trust_step, pid_step, settle_step
from ccrft.reward import (
    batch_curiosity, l2_smooth_prior, penalty, reward_breakdown, trajectory_reward, variant_weights,
)
from config import NoiseConfig, PidConfig, RewardWeights, RftConfig, WorldConfig
from percept.embedding import Projector
from percept.encoder import input_dim
from policy.features import ActionSpace, FeatureLayout
from policy.model import (
    PolicyParams, Trajectory, TrajStep, action_distribution, init_policy, sample_trajectory, step_kl,
)
from toyworld.scene import Query, generate_clip, make_query, make_split
from toyworld.tools import ToolCall
from utils.errors import ConfigError, GenerationError
from utils.seeding import make_rng

EXACT = NoiseConfig(p_ocr=0.0, box_jitter=0, trk_jitter=0, temp_jitter=0, p_prop=0.0)
ONE = np.ones(1)
# шаг ровно lr·∇, без растяжения под целевой KL
PLAIN = PidState(beta=1.0, trust_scale=0.0)


# ---------------------------------------------------------------------------------
# БАНДИТЫ ДЛЯ GRPO
# ---------------------------------------------------------------------------------

def _bandit_policy(logits):
    return PolicyParams(np.asarray([logits], dtype=float), np.zeros((0, 2)), np.zeros(0, dtype=int))


def _bandit_traj(policy, a):
    p = action_distribution(policy, ONE)
    return Trajectory(steps=[TrajStep(ONE, int(a), p, float(np.log(p[a])))])


class ScriptedBandit:
    """Фиксированные действия и награды: градиент считается вручную."""

    def __init__(self, actions, rewards):
        self.actions, self.rewards = actions, np.asarray(rewards, dtype=float)

    def rollout_group(self, policy, prompt, k, rng):
        return [_bandit_traj(policy, a) for a in self.actions[:k]], self.rewards[:k]


class SampledBandit:
    def __init__(self, best):
        self.best = best

    def rollout_group(self, policy, prompt, k, rng):
        p = action_distribution(policy, ONE)
        acts = rng.choice(p.size, size=k, p=p)
        return [_bandit_traj(policy, a) for a in acts], (acts == self.best).astype(float)


def _kl(policy, anchor):
    return step_kl(policy, anchor, np.ones((1, 1)))


# ---------------------------------------------------------------------------------
# trajectory_reward
# ---------------------------------------------------------------------------------

def _traj(correct: bool, length: int = 3):
    q = Query("q0", "attribute", 5, 0, 1)
    steps = [TrajStep(ONE, 0, np.ones(1), 0.0) for _ in range(length)]
    return Trajectory(steps=steps, answer=1 if correct else 0, query=q)


def test_correct_answer_without_intrinsics_scores_one():
    w = RewardWeights(w1=1.0, w2=1.0, w3=1.0, w4=1.0)
    assert trajectory_reward(_traj(True), 0.0, 0.0, w) == pytest.approx(1.0)
    assert trajectory_reward(_traj(False), 0.0, 0.0, w) == pytest.approx(-1.0)


def test_penalty_hand_example():
    assert penalty(1, 8, RewardWeights()) == pytest.approx(0.34)
    assert penalty(0, 6, RewardWeights()) == 0.0


def test_large_answer_weight_dominates():
    w = RewardWeights(w1=10.0)
    b = reward_breakdown(False, 0, 4, cur=3.0, coh=3.0, weights=w)
    assert b.total < 0


def test_variant_weights_zero_the_right_terms():
    base = RewardWeights()
    only = variant_weights("answer_only", base)
    assert (only.w1, only.w2, only.w3, only.w4) == (base.w1, 0.0, 0.0, 0.0)
    both = variant_weights("both", base)
    assert both.w2 == base.w2 and both.w3 == base.w3 and both.w4 == 0.0
    assert variant_weights("both_penalty", base) == base
    with pytest.raises(ConfigError):
        variant_weights("everything", base)


def test_batch_curiosity_modes():
    per_traj = [np.array([1.0]), np.array([1.0, 1.0]), np.array([1.0, 1.0, 1.0])]
    r = batch_curiosity(per_traj, "trajectory")
    assert r.mean() == pytest.approx(0.0, abs=1e-9)
    assert r[0] < r[1] < r[2]
    # все шаги одинаковы → z-score шагов нулевой
    assert batch_curiosity(per_traj, "step") == pytest.approx(np.zeros(3))
    with pytest.raises(ConfigError):
        batch_curiosity(per_traj, "episode")


def test_l2_smooth_prior():
    clip = generate_clip(WorldConfig(), 0)
    same = [ToolCall("SEG", 5), ToolCall("PROP", 5)]
    far = [ToolCall("SEG", 0), ToolCall("SEG", 15)]
    assert l2_smooth_prior(same, clip) == 0.0
    assert l2_smooth_prior(far, clip) < 0.0
    assert l2_smooth_prior(same[:1], clip) == 0.0


# ---------------------------------------------------------------------------------
# pid_step
# ---------------------------------------------------------------------------------

def test_pid_on_target_keeps_beta():
    pid = PidState(beta=0.7)
    for _ in range(5):
        pid, beta = pid_step(pid, 0.15, 0.15)
    assert beta == pytest.approx(0.7)


def test_pid_first_call_example():
    pid, beta = pid_step(PidState(beta=1.0), 0.30, 0.15)
    assert beta == pytest.approx(1.35)
    assert pid.integral == pytest.approx(1.0)


def test_pid_integral_clamps_under_sustained_error():
    pid = PidState(beta=1e-3)
    prev = pid.beta
    for _ in range(10):
        prev = pid.beta
        pid, beta = pid_step(pid, 0.30, 0.15)
    assert pid.integral == pytest.approx(5.0)
    assert beta / prev == pytest.approx(1.0 + 0.3 + 0.25)


def test_pid_derivative_only_after_warmup():
    pid = PidState(beta=1.0, calls=100)
    _, beta = pid_step(pid, 0.30, 0.15)
    assert beta == pytest.approx(1.0 + 0.3 + 0.05 + 0.1)


def test_pid_bounds_hold_for_any_sequence():
    rng = np.random.default_rng(0)
    pid = PidState.from_config(PidConfig(), 1.0)
    for _ in range(500):
        pid, beta = pid_step(pid, float(rng.exponential(0.5)), 0.15)
        assert 1e-3 <= beta <= 1e2
        assert abs(pid.integral) <= 5.0


def test_pid_rejects_non_positive_target():
    with pytest.raises(ValueError):
        pid_step(PidState(), 0.1, 0.0)


def test_corridor_fraction():
    assert corridor_fraction([0.5, 0.12, 0.15, 0.3, 0.19], 0.10, 0.20, burn_in=1) == pytest.approx(0.75)
    assert settle_step([0.01, 0.05, 0.12, 0.3], 0.10, 0.20) == 2
    assert settle_step([0.01, 0.05], 0.10, 0.20) is None


def test_pid_multiplier_is_bounded_per_step():
    # e = −0.5, Δe = −9.5 после прогрева: 1 − 0.15 − 0.025 − 0.95 < 0 → β/2, а не β_min
    pid = PidState(beta=1.0, calls=100, prev_error=9.0)
    _, beta = pid_step(pid, 0.075, 0.15)
    assert beta == pytest.approx(0.5)
    # e = 9: 1 + 2.7 + 0.45 = 4.15 → ×2
    _, beta = pid_step(PidState(beta=1.0), 1.5, 0.15)
    assert beta == pytest.approx(2.0)


def test_pid_config_carries_ratio_and_stretch_limit():
    pid = PidState.from_config(PidConfig(max_ratio=1.5, trust_scale=3.0), 0.5)
    assert pid.max_ratio == 1.5 and pid.trust_scale == 3.0
    assert pid.saturated(3.0) and not pid.saturated(2.9)
    assert not PLAIN.saturated(100.0)


# ---------------------------------------------------------------------------------
# kl_trust_step
# ---------------------------------------------------------------------------------

def test_kl_trust_step_stretches_small_step_to_target():
    ref = _bandit_policy([0.0, 0.0, 0.0, 0.0])
    cand = _bandit_policy([0.5, 0.0, 0.0, 0.0])
    assert _kl(cand, ref) < 0.15
    new, lam = kl_trust_step(cand, ref, np.ones((1, 1)), None, 0.15, max_scale=4.0)
    assert 1.0 < lam < 4.0
    assert _kl(new, ref) == pytest.approx(0.15, rel=1e-6)
    assert np.allclose(new.w_act, lam * cand.w_act)


def test_kl_trust_step_shrinks_large_step_to_target():
    ref = _bandit_policy([0.2, -0.1, 0.0, 0.4])
    cand = _bandit_policy([3.2, -0.1, 0.0, 0.4])
    new, lam = kl_trust_step(cand, ref, np.ones((1, 1)), None, 0.15)
    assert 0.0 < lam < 1.0
    assert _kl(new, ref) == pytest.approx(0.15, rel=1e-6)


def test_kl_trust_step_stretch_is_capped():
    ref = _bandit_policy([0.0, 0.0, 0.0])
    cand = _bandit_policy([0.01, 0.0, 0.0])
    new, lam = kl_trust_step(cand, ref, np.ones((1, 1)), None, 0.15, max_scale=4.0)
    assert lam == 4.0
    assert _kl(new, ref) == pytest.approx(_kl(interpolate(ref, cand, 4.0), ref))
    assert _kl(new, ref) < 0.15
    same, _ = kl_trust_step(ref.copy(), ref, np.ones((1, 1)), None, 0.15)
    assert np.allclose(same.w_act, ref.w_act)


def test_kl_along_the_line_from_reference_is_monotone():
    rng = np.random.default_rng(4)
    ref = _bandit_policy(rng.normal(size=5))
    cand = _bandit_policy(rng.normal(size=5))
    kls = [_kl(interpolate(ref, cand, lam), ref) for lam in np.linspace(0.0, 4.0, 41)]
    assert kls[0] == pytest.approx(0.0, abs=1e-12)
    assert all(b >= a - 1e-12 for a, b in zip(kls, kls[1:]))


def test_kl_trust_step_rejects_non_positive_target():
    ref = _bandit_policy([0.0, 0.0])
    with pytest.raises(ValueError):
        kl_trust_step(ref, ref, np.ones((1, 1)), None, 0.0)


def test_controlled_rft_settles_into_corridor_and_stays():
    anchor = _bandit_policy([0.0, 0.0, 0.0, 0.0])
    cfg = RftConfig(updates=600, group_size=8, prompts_per_update=2, lr=0.1, kl_target=0.15, beta_init=1.0)
    result = rft_train(anchor.copy(), anchor, SampledBandit(best=3), [None, None], cfg, PidConfig(), seed=5)
    kl = [r["kl"] for r in result.records]
    settled = settle_step(kl, 0.10, 0.20)
    assert settled is not None and settled < 500
    assert corridor_fraction(kl, 0.10, 0.20, burn_in=settled) >= 0.9
    assert np.median(kl[settled:]) == pytest.approx(0.15, abs=0.03)
    betas = np.array([r["beta"] for r in result.records])
    assert np.all((betas > 1e-3) & (betas < 1e2))
    # политика всё равно учится: лучшая рука вероятнее остальных
    p = action_distribution(result.params, ONE)
    assert p.argmax() == 3


# ---------------------------------------------------------------------------------
# grpo_update
# ---------------------------------------------------------------------------------

def test_group_advantages_are_standardized():
    a = group_advantages([0.0, 1.0, 3.0, 4.0])
    assert a.mean() == pytest.approx(0.0, abs=1e-9)
    assert a.std() == pytest.approx(1.0, abs=1e-6)
    assert not group_advantages([2.0, 2.0, 2.0]).any()
    n = normalize_batch(np.array([2.0, -2.0, 1.0, -1.0]))
    assert np.sqrt(np.mean(n ** 2)) == pytest.approx(1.0)


def test_two_action_update_matches_closed_form():
    policy = _bandit_policy([0.0, 0.0])
    env = ScriptedBandit([0, 1, 0, 1], [0.0, 1.0, 0.0, 1.0])
    cfg = RftConfig(lr=0.1, grad_clip=1.0)
    new, _, stats = grpo_update(policy, policy.copy(), [None], 4, PLAIN, cfg, env, make_rng(0))
    # ∇ = −½(e1 − e0) в точке равномерной политики
    assert new.w_act[0] == pytest.approx([-0.05, 0.05])
    p = action_distribution(new, ONE)
    assert p[1] > p[0]
    assert stats["zero_std_groups"] == 0


def test_equal_rewards_move_only_through_kl():
    anchor = _bandit_policy([0.0, 0.0])
    policy = _bandit_policy([1.0, 0.0])
    env = ScriptedBandit([0, 1, 0, 1], [1.0, 1.0, 1.0, 1.0])
    new, _, stats = grpo_update(policy, anchor, [None], 4, PLAIN, RftConfig(lr=0.1), env, make_rng(0))
    assert stats["zero_std_groups"] == 1
    assert not np.allclose(new.w_act, policy.w_act)
    assert _kl(new, anchor) < _kl(policy, anchor)


def test_large_beta_pulls_back_to_anchor():
    anchor = _bandit_policy([0.0, 0.0, 0.0])
    policy = _bandit_policy([2.0, 0.0, 0.0])
    env = ScriptedBandit([0, 1, 2, 0, 1, 2], [1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    new, _, _ = grpo_update(policy, anchor, [None], 6, PidState(beta=100.0, trust_scale=0.0), RftConfig(lr=0.1), env, make_rng(0))
    assert _kl(new, anchor) < _kl(policy, anchor)


def test_removing_anchor_drifts_further():
    anchor = _bandit_policy([0.0, 0.0, 0.0, 0.0])
    env = SampledBandit(best=3)
    cfg = RftConfig(updates=60, group_size=8, prompts_per_update=2, lr=0.5, kl_target=0.15, beta_init=1.0)
    free = rft_train(anchor.copy(), anchor, env, [None, None], cfg, PidConfig(), seed=3, use_anchor=False)
    held = rft_train(anchor.copy(), anchor, env, [None, None], cfg, PidConfig(), seed=3, use_anchor=True)
    assert free.records[-1]["kl"] > held.records[-1]["kl"]
    assert all(r["beta"] == 0.0 for r in free.records)


def test_grpo_objective_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    policy = _bandit_policy(rng.normal(size=3))
    anchor = _bandit_policy(rng.normal(size=3))
    trajs = [_bandit_traj(policy, a) for a in (0, 2, 1, 2)]
    A = np.array([0.7, -1.2, 0.4, 0.1])
    _, g = grpo_objective(policy, anchor, trajs, A, beta=0.8)
    eps = 1e-6
    for j in range(3):
        hi, lo = policy.copy(), policy.copy()
        hi.w_act[0, j] += eps
        lo.w_act[0, j] -= eps
        numeric = (grpo_objective(hi, anchor, trajs, A, 0.8)[0] - grpo_objective(lo, anchor, trajs, A, 0.8)[0]) / (2 * eps)
        assert g.w_act[0, j] == pytest.approx(numeric, rel=1e-4, abs=1e-8)


def test_group_size_below_two_is_rejected():
    policy = _bandit_policy([0.0, 0.0])
    with pytest.raises(ValueError):
        grpo_update(policy, policy, [None], 1, None, RftConfig(), ScriptedBandit([0], [1.0]), make_rng(0))


# ---------------------------------------------------------------------------------
# RftEnvironment
# ---------------------------------------------------------------------------------

def _toy_setup(variant="both_penalty"):
    world = WorldConfig()
    for seed in range(100):
        clip = generate_clip(world, seed)
        try:
            query = make_query(clip, "attribute", make_rng(seed, "q"))
            break
        except GenerationError:
            continue
    layout = FeatureLayout.for_world(world)
    policy = init_policy(layout, ActionSpace(world.frames), world.n_answers, seed=0)
    env = RftEnvironment(
        clips={clip.clip_id: clip},
        weights=variant_weights(variant, RewardWeights()),
        noise=EXACT,
        max_steps=6,
        projector=Projector.init(input_dim(world.n_codes), hidden=16, out_dim=8, seed=0),
    )
    return env, policy, (clip.clip_id, query)


def test_answer_only_rewards_are_plus_minus_one():
    env, policy, prompt = _toy_setup("answer_only")
    trajs, rewards = env.rollout_group(policy, prompt, 8, make_rng(1))
    assert len(trajs) == 8
    for t, r in zip(trajs, rewards):
        assert r == (1.0 if t.correct else -1.0)


def test_rft_train_logs_corridor_records():
    env, policy, prompt = _toy_setup("both_penalty")
    cfg = RftConfig(updates=3, group_size=4, prompts_per_update=1, lr=0.1)
    result = rft_train(policy, policy.copy(), env, [prompt], cfg, PidConfig(), seed=0)
    assert len(result.records) == 3
    for rec in result.records:
        assert {"step", "mean_reward", "kl", "beta", "grad_norm", "r_total"} <= set(rec)
        assert 1e-3 <= rec["beta"] <= 1e2
        assert np.isfinite(rec["kl"])


def test_projector_alignment_only_touches_projector():
    env, policy, prompt = _toy_setup("both")
    before = env.projector.copy()
    cfg = RftConfig(updates=2, group_size=8, prompts_per_update=1, lr=0.1, projector_lr=0.05)
    rft_train(policy, policy.copy(), env, [prompt], cfg, PidConfig(), seed=0)
    changed = any(not np.allclose(a, b) for a, b in zip(before.mlp.weights, env.projector.mlp.weights))
    assert changed


def _chain_env(variant, seed):
    world = WorldConfig()
    items = make_split(world, 6, seed=seed, tag="rft")
    # короткий L0, чтобы штраф за длину работал внутри max_steps
    base = RewardWeights(w2=0.0, l0=2, alpha_len=0.2)
    env = RftEnvironment(
        clips={clip.clip_id: clip for clip, _ in items},
        weights=variant_weights(variant, base),
        noise=EXACT,
        max_steps=6,
        projector=Projector.init(input_dim(world.n_codes), hidden=16, out_dim=8, seed=0),
    )
    layout = FeatureLayout.for_world(world)
    policy = init_policy(layout, ActionSpace(world.frames), world.n_answers, seed=seed)
    return env, policy, [(clip.clip_id, query) for clip, query in items]


def _mean_length(policy, env, prompts, seed):
    rng = make_rng(seed, "chain-eval")
    lengths = [
        sample_trajectory(policy, env.clips[cid], query, env.max_steps, env.noise, rng).length
        for cid, query in prompts for _ in range(40)
    ]
    return float(np.mean(lengths))


def test_full_reward_shortens_chains_against_answer_only_at_matched_kl():
    cfg = RftConfig(updates=80, group_size=8, prompts_per_update=2, lr=0.1)
    wins = 0
    for seed in range(5):
        out = {}
        for variant in ("both_penalty", "answer_only"):
            env, policy, prompts = _chain_env(variant, seed)
            result = rft_train(policy, policy.copy(), env, prompts, cfg, PidConfig(), seed=seed)
            tail_kl = float(np.mean([rec["kl"] for rec in result.records[-20:]]))
            out[variant] = (_mean_length(result.params, env, prompts, seed), tail_kl)
        assert abs(out["both_penalty"][1] - out["answer_only"][1]) <= 0.05
        wins += out["both_penalty"][0] < out["answer_only"][0]
    assert wins >= 4
