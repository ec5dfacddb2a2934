# src/test_metrics.py

import logging

import numpy as np
import pytest

from config import NoiseConfig, RcprConfig, WorldConfig
from metrics.fidelity import alignment_score, pseudo_references, sim_behav, soft_dtw, visfid, visfid_observations
from metrics.process import (
    acceptance_per_1k, chain_quality, ChainCandidate, process_record, process_summary, racpr,
    racpr_from_cosines, racpr_sensitivity, rapr,
)
from metrics.selective import Decision, bootstrap_ci, risk_coverage
from percept.encoder import FrozenEncoder, input_dim
from percept.zstats import ZStats
from policy.features import ActionSpace, FeatureLayout
from policy.model import Trajectory, TrajStep, init_policy, sample_trajectory
from toyworld.scene import Footprint, Query, Rect, generate_clip, make_query
from toyworld.tools import Observation, ToolCall
from utils.seeding import make_rng

CFG = RcprConfig()
UNIT = ZStats("test", 0.0, 1.0)


def _obs(op, rect, payload=None, f0=0, f1=0, success=True):
    return Observation(op, payload or {}, success, Footprint(Rect(*rect), f0, f1))


def _step(obs, decisive=True):
    return TrajStep(np.zeros(1), 0, np.ones(1), 0.0, call=ToolCall(obs.op, 0), obs=obs, decisive=decisive)


def _answer_step():
    return TrajStep(np.zeros(1), 0, np.ones(1), 0.0, decisive=True)


def _traj(*obs, answer=True, correct=True):
    steps = [_step(o) for o in obs] + ([_answer_step()] if answer else [])
    q = Query("q0", "attribute", 0, 0, 1)
    return Trajectory(steps=steps, answer=1 if correct else 0, query=q, clip_id="c0")


# ---------------------------------------------------------------------------------
# RaPR / RaCPR
# ---------------------------------------------------------------------------------

def test_rapr_examples():
    assert rapr([1, 1, 1]) == 1.0
    assert rapr([1, 0, 1, 0]) == 0.5
    assert rapr([]) == 0.0


def test_racpr_without_chain_is_zero():
    assert racpr_from_cosines(np.array([0.9, -1.0, 0.9]), [1, 1, 1, 1], CFG) == 0.0
    assert racpr(np.ones((1, 4)), [1], CFG, UNIT) == 0.0


def test_racpr_boundary_chain_scores_zero():
    z = np.full(CFG.l0, CFG.tau)
    assert racpr_from_cosines(z, [1] * (CFG.l0 + 1), CFG) == pytest.approx(0.0)


def test_racpr_chain_of_four_from_embeddings():
    E = np.tile([1.0, 0.0, 0.0], (4, 1))
    stats = ZStats("test", 0.5, 1.0)
    assert racpr(E, [1, 1, 1, 1], CFG, stats) == pytest.approx(0.2)


def test_chain_quality_penalizes_length():
    chain = ChainCandidate(0, 8, np.full(8, 0.5), np.ones(8, dtype=int))
    assert chain_quality(chain, CFG) == pytest.approx(0.2 - 0.02 * 2 / 8)


def _window_oracle(z, u, cfg, maximal_only=True):
    """
    Перебор всех окон [i, j) переходов t = 0..T−2 (переход t — шаги t и t+1).
    Гейт и качество считаются прямо по определению, без функций модуля.
    """
    T = len(u)

    def passes(t):
        return u[t] == 1 and u[t + 1] == 1 and z[t] >= cfg.tau

    best = None
    for i in range(T - 1):
        for j in range(i + 1, T):
            n = j - i
            if n < cfg.l_min or not all(passes(t) for t in range(i, j)):
                continue
            if maximal_only and ((i > 0 and passes(i - 1)) or (j < T - 1 and passes(j))):
                continue
            hinge = sum(max(z[t] - cfg.tau, 0.0) for t in range(i, j)) / n
            length = cfg.alpha_len * max(0, n - cfg.l0) / n
            invalid = cfg.alpha_inv * sum(1 - u[t + 1] for t in range(i, j)) / n
            q = hinge - length - invalid
            best = q if best is None else max(best, q)
    return 0.0 if best is None else best


@pytest.mark.parametrize("l_min", [2, 3, 4])
def test_racpr_matches_brute_force(l_min):
    rng = make_rng(11, "racpr", l_min)
    cfg = RcprConfig(l_min=l_min, l0=4)
    for _ in range(200):
        T = int(rng.integers(2, 9))
        z = rng.normal(0.5, 0.5, size=T - 1)
        u = (rng.random(T) < 0.85).astype(int).tolist()
        assert racpr_from_cosines(z, u, cfg) == pytest.approx(_window_oracle(z, u, cfg))


def test_racpr_equals_best_window_when_subchains_tie():
    # постоянный косинус и L0 ≥ T: любое под-окно цепочки имеет то же качество,
    # максимум по всем окнам совпадает с максимумом по максимальным отрезкам
    rng = make_rng(12, "racpr-windows")
    cfg = RcprConfig(l0=8)
    for _ in range(200):
        T = int(rng.integers(2, 9))
        z = np.full(T - 1, float(rng.uniform(0.3, 1.5)))
        z[rng.random(T - 1) < 0.2] = -1.0
        u = (rng.random(T) < 0.85).astype(int).tolist()
        expected = _window_oracle(z, u, cfg, maximal_only=False)
        assert racpr_from_cosines(z, u, cfg) == pytest.approx(expected)
        assert expected == pytest.approx(_window_oracle(z, u, cfg))


def test_racpr_rejects_misaligned_bits():
    with pytest.raises(ValueError):
        racpr(np.eye(3), [1, 1], CFG, UNIT)


# ---------------------------------------------------------------------------------
# VisFid
# ---------------------------------------------------------------------------------

def test_visfid_examples():
    seg = _obs("SEG", (0, 0, 10, 10), {"box": [0, 0, 10, 10]})
    traj = _traj(seg)
    assert visfid(traj, [seg]) == pytest.approx(1.0)
    assert visfid(traj, []) == 0.0
    ref = _obs("SEG", (0, 0, 10, 6), {"box": [0, 0, 10, 6]})
    assert visfid(traj, [ref]) == pytest.approx(0.6)


def test_visfid_missing_reference_is_warned(caplog):
    seg = _obs("SEG", (0, 0, 10, 10), {"box": [0, 0, 10, 10]})
    with caplog.at_level(logging.WARNING, logger="pixelsoul-metrics"):
        assert visfid(_traj(seg), []) == 0.0
    assert any(r.levelno == logging.WARNING and "no pseudo-reference" in r.getMessage() for r in caplog.records)


def test_visfid_one_reference_per_step():
    a = _obs("SEG", (0, 0, 10, 10), {"box": [0, 0, 10, 10]})
    b = _obs("SEG", (1, 0, 10, 10), {"box": [1, 0, 10, 10]})
    # единственный эталон уходит шагу с бóльшим перекрытием, второй шаг получает 0
    assert visfid_observations([a, b], [a]) == pytest.approx(0.5)


def test_pseudo_references_skip_failed_and_self():
    good = _obs("OCR", (0, 0, 4, 4), {"text": "AB"})
    bad = _obs("OCR", (0, 0, 4, 4), {"text": ""}, success=False)
    trajs = [_traj(good), _traj(bad), _traj(good, correct=False)]
    assert pseudo_references(trajs, exclude=None) == [good]
    assert pseudo_references(trajs, exclude=0) == []


# ---------------------------------------------------------------------------------
# ПОВЕДЕНЧЕСКОЕ СХОДСТВО
# ---------------------------------------------------------------------------------

def test_sim_behav_identity_and_disjoint():
    a = _traj(_obs("SEG", (0, 0, 4, 4)), _obs("OCR", (0, 0, 4, 4), {"text": "AB"}))
    assert sim_behav(a, a) == pytest.approx(1.0)
    x = _traj(_obs("SEG", (0, 0, 2, 2)), answer=False)
    y = _traj(_obs("OCR", (10, 10, 2, 2), {"text": "Z"}), answer=False)
    assert sim_behav(x, y) == pytest.approx(0.0)


def test_sim_behav_symmetric_and_bounded():
    rng = make_rng(12, "sim")
    ops = ["SEG", "ZOOM", "TRK", "TEMP"]
    for _ in range(30):
        def rand_traj():
            n = int(rng.integers(1, 5))
            obs = [
                _obs(ops[int(rng.integers(0, 4))],
                     (int(rng.integers(0, 8)), int(rng.integers(0, 8)), int(rng.integers(1, 6)), int(rng.integers(1, 6))),
                     f0=0, f1=int(rng.integers(0, 3)))
                for _ in range(n)
            ]
            return _traj(*obs)
        a, b = rand_traj(), rand_traj()
        s = sim_behav(a, b)
        assert 0.0 <= s <= 1.0
        assert s == pytest.approx(sim_behav(b, a))


def _hard_dtw(cost):
    n, m = cost.shape
    best = np.inf

    def walk(i, j, acc):
        nonlocal best
        acc += cost[i, j]
        if i == n - 1 and j == m - 1:
            best = min(best, acc)
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, acc)

    walk(0, 0, 0.0)
    return best


def test_soft_dtw_converges_to_hard_dtw():
    rng = make_rng(13, "dtw")
    for n, m in [(1, 1), (2, 3), (3, 4), (4, 4)]:
        cost = rng.random((n, m))
        assert soft_dtw(cost, 1e-4) == pytest.approx(_hard_dtw(cost), abs=1e-3)


def test_soft_dtw_rises_toward_hard_min_as_gamma_shrinks():
    cost = make_rng(14, "dtw").random((4, 3))
    values = [soft_dtw(cost, g) for g in (1.0, 0.5, 0.2, 0.1, 0.01)]
    assert np.all(np.diff(values) >= -1e-12)
    assert values[-1] <= _hard_dtw(cost) + 1e-12


def test_alignment_score_range():
    assert alignment_score(np.zeros((3, 3)), 0.2) == pytest.approx(1.0)
    assert alignment_score(np.ones((2, 3)), 0.2) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        soft_dtw(np.ones((2, 2)), 0.0)


# ---------------------------------------------------------------------------------
# RISK–COVERAGE И БУТСТРАП
# ---------------------------------------------------------------------------------

def test_risk_coverage_examples():
    decisions = [Decision(0.5, True, True)] * 6 + [Decision(0.5, True, False)] * 2 + [Decision(0.5, False, True)] * 2
    point = risk_coverage(decisions, [0.1])[0]
    assert (point.coverage, point.err_sel) == pytest.approx((0.8, 0.25))

    everything = [Decision(0.5, True, c) for c in (True, True, False, True)]
    assert risk_coverage(everything, [0.0])[0].coverage == 1.0
    assert risk_coverage(everything, [0.0])[0].err_sel == pytest.approx(0.25)

    oracle = [Decision(0.9, True, True)] * 3 + [Decision(0.05, True, False)] * 2
    p = risk_coverage(oracle, [0.1])[0]
    assert p.err_sel == 0.0 and p.coverage == pytest.approx(0.6)


def test_risk_coverage_gap_and_monotone():
    rng = make_rng(15, "rc")
    decisions = [Decision(float(rng.random()), bool(rng.random() < 0.9), bool(rng.random() < 0.7)) for _ in range(100)]
    curve = risk_coverage(decisions, [0.0, 0.2, 0.5, 0.8, 1.5])
    cov = [p.coverage for p in curve]
    assert cov == sorted(cov, reverse=True)
    assert curve[-1].gap and np.isnan(curve[-1].err_sel)
    assert sum(1 for p in curve if not p.gap) == 4
    with pytest.raises(ValueError):
        risk_coverage([], [0.1])


def test_bootstrap_examples():
    assert bootstrap_ci([2.0] * 10) == (2.0, 2.0)
    x = make_rng(16, "boot").normal(1.0, 2.0, size=50)
    lo, hi = bootstrap_ci(x)
    assert lo <= x.mean() <= hi
    assert bootstrap_ci(x, seed=3) == bootstrap_ci(x, seed=3)
    with pytest.raises(ValueError):
        bootstrap_ci([])
    with pytest.raises(ValueError):
        bootstrap_ci(x, n_resamples=10)


def test_bootstrap_coverage_near_nominal():
    rng = make_rng(17, "coverage")
    hits = 0
    for i in range(500):
        lo, hi = bootstrap_ci(rng.normal(0.0, 1.0, size=100), seed=i)
        hits += lo <= 0.0 <= hi
    assert 0.92 <= hits / 500 <= 0.98


# ---------------------------------------------------------------------------------
# СВОДКИ НА ТРАЕКТОРИЯХ TOYWORLD
# ---------------------------------------------------------------------------------

def test_process_record_on_sampled_trajectories():
    world = WorldConfig()
    clip = generate_clip(world, 1)
    query = make_query(clip, "temporal", make_rng(0))
    policy = init_policy(FeatureLayout.for_world(world), ActionSpace(world.frames), world.n_answers, seed=0)
    encoder = FrozenEncoder.build(input_dim(world.n_codes), 16, seed=5)
    rng = make_rng(18, "rollouts")
    records = []
    for _ in range(6):
        traj = sample_trajectory(policy, clip, query, 6, NoiseConfig(), rng)
        rec = process_record(traj, clip, encoder, UNIT, CFG, visfid=visfid(traj, []))
        assert 0.0 <= rec.rapr <= 1.0
        assert rec.visfid == 0.0
        records.append(rec)
    summary = process_summary(records)
    assert summary["n"] == 6
    assert 1.0 <= summary["chain_length"] <= 6.0


def test_racpr_sensitivity_grid():
    rng = make_rng(19, "sens")
    items = [(rng.normal(size=(6, 4)), [1] * 6) for _ in range(10)]
    rows = racpr_sensitivity(items, UNIT, CFG)
    assert len(rows) == 12
    default = [r for r in rows if r["tau"] == CFG.tau and r["l_min"] == CFG.l_min][0]
    assert default["delta"] == 0.0


def test_acceptance_per_1k():
    assert acceptance_per_1k(50, 200) == 250.0
    assert acceptance_per_1k(0, 0) == 0.0
