# src/test_percept.py

import numpy as np
import pytest
from scipy.special import expit
from scipy.stats import special_ortho_group

from config import DynamicsConfig, WorldConfig
from percept.dynamics import (
    CuriosityTerms, DynamicsHead, curiosity, curiosity_batch, curiosity_terms, dynamics_loss, gate_sweep,
    gated_reward, prediction_error, train_dynamics,
)
from percept.embedding import Projector, adjacent_cosines, cosine, embed_inputs, embed_step, projector_vjp
from percept.encoder import (
    FrozenEncoder, hash_tokens, input_dim, step_inputs, trace_pairs, transition_rows, visual_summary,
)
from percept.mlp import Mlp
from percept.zstats import ZStats, coherence_reward, fit_zstats, zstats_from_json, zstats_to_json
from toyworld.scene import Footprint, Rect, generate_clip, make_query
from toyworld.teacher import generate_teacher_traces
from utils.errors import TrainingError
from utils.seeding import make_rng


def _unit(angle):
    return np.array([np.cos(angle), np.sin(angle)])


# ---------------------------------------------------------------------------------
# embed_step
# ---------------------------------------------------------------------------------

def test_embedding_has_unit_norm():
    proj = Projector.init(10, hidden=16, out_dim=8, seed=3)
    rng = np.random.default_rng(0)
    for _ in range(5):
        e = embed_step(rng.normal(size=4), rng.normal(size=4), np.eye(2)[0], proj)
        assert np.linalg.norm(e.vector) == pytest.approx(1.0, abs=1e-6)


def test_identical_inputs_give_cosine_one():
    proj = Projector.init(6, hidden=12, out_dim=5, seed=1)
    v, x, a = np.ones(2), np.arange(3.0), np.array([1.0])
    assert cosine(embed_step(v, x, a, proj, 0).vector, embed_step(v, x, a, proj, 1).vector) == pytest.approx(1.0)


def test_linear_projector_on_two_dim_toy():
    proj = Projector.linear(np.eye(2))
    e = embed_step(np.array([3.0]), np.array([4.0]), np.zeros(0), proj)
    assert e.vector == pytest.approx([0.6, 0.8])


def test_zero_vector_falls_back_to_first_basis_vector():
    proj = Projector.linear(np.eye(3))
    e = embed_step(np.zeros(1), np.zeros(1), np.zeros(1), proj)
    assert e.vector == pytest.approx([1.0, 0.0, 0.0])


def test_projector_vjp_matches_finite_differences():
    proj = Projector.init(4, hidden=6, out_dim=3, seed=2, layernorm=True)
    rng = np.random.default_rng(1)
    rows = rng.normal(size=(5, 4))
    c = rng.normal(size=(5, 3))

    def objective(p):
        return float(np.sum(embed_inputs(p, rows)[0] * c))

    E, cache = embed_inputs(proj, rows)
    d_w, d_b = projector_vjp(proj, cache, c)
    eps = 1e-6
    for layer, idx in ((0, (1, 2)), (1, (4, 0)), (1, (0, 2))):
        hi, lo = proj.copy(), proj.copy()
        hi.mlp.weights[layer][idx] += eps
        lo.mlp.weights[layer][idx] -= eps
        numeric = (objective(hi) - objective(lo)) / (2 * eps)
        assert d_w[layer][idx] == pytest.approx(numeric, rel=1e-4, abs=1e-8)
    hi, lo = proj.copy(), proj.copy()
    hi.mlp.biases[0][3] += eps
    lo.mlp.biases[0][3] -= eps
    assert d_b[0][3] == pytest.approx((objective(hi) - objective(lo)) / (2 * eps), rel=1e-4, abs=1e-8)


# ---------------------------------------------------------------------------------
# coherence_reward / fit_zstats
# ---------------------------------------------------------------------------------

def test_coherence_of_identical_embeddings_equals_step_count():
    E = np.tile(np.array([0.0, 1.0]), (5, 1))
    assert coherence_reward(E, ZStats("f", 0.0, 1.0)) == pytest.approx(4.0)


def test_coherence_single_step_is_zero():
    assert coherence_reward(np.array([[1.0, 0.0]]), ZStats("f", 0.3, 0.2)) == 0.0


def test_coherence_hand_example():
    a1 = np.arccos(0.8)
    E = np.stack([_unit(0.0), _unit(a1), _unit(a1 + np.arccos(0.2))])
    assert adjacent_cosines(E) == pytest.approx([0.8, 0.2])
    assert coherence_reward(E, ZStats("f", 0.5, 0.3)) == pytest.approx(0.0, abs=1e-9)


def test_coherence_invariant_under_rotation():
    rng = np.random.default_rng(4)
    E = rng.normal(size=(6, 3))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    stats = ZStats("f", 0.1, 0.4)
    base = coherence_reward(E, stats)
    for seed in range(5):
        Q = special_ortho_group.rvs(3, random_state=seed)
        assert coherence_reward(E @ Q.T, stats) == pytest.approx(base)


def test_fit_zstats_population_std_and_floor():
    stats = fit_zstats([np.stack([_unit(0), _unit(np.pi / 2)]), np.stack([_unit(0), _unit(0)])], "track")
    assert stats.mean == pytest.approx(0.5)
    assert stats.std == pytest.approx(0.5)

    flat = fit_zstats([np.tile(_unit(0.3), (4, 1))], "ocr")
    assert flat.mean == pytest.approx(1.0)
    assert flat.std == pytest.approx(1e-6)


def test_fit_zstats_names_family_on_too_few_pairs():
    with pytest.raises(ValueError, match="temporal"):
        fit_zstats([np.stack([_unit(0), _unit(1)])], "temporal")


def test_zstats_snapshot_gives_identical_rewards():
    rng = np.random.default_rng(2)
    E = rng.normal(size=(5, 4))
    stats = fit_zstats([rng.normal(size=(4, 4)) for _ in range(3)], "attribute")
    back = zstats_from_json(zstats_to_json([stats]))["attribute"]
    assert coherence_reward(E, back) == coherence_reward(E, stats)


# ---------------------------------------------------------------------------------
# curiosity
# ---------------------------------------------------------------------------------

def _fixed_head(v_hat, validity_logit=0.0, in_dim=3, dropout=0.0):
    """Голова с нулевыми весами: предсказание не зависит от входа."""
    d = len(v_hat)
    mlp = Mlp([np.zeros((in_dim, d + 1))], [np.append(np.asarray(v_hat, dtype=float), validity_logit)], dropout)
    return DynamicsHead(mlp, d, trained=True)


def test_prediction_error_two_dim_example():
    assert prediction_error(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.5)[0] == pytest.approx(1.5)


def test_perfect_prediction_gives_zero_curiosity():
    v = np.array([0.2, 0.5, 0.3])
    head = _fixed_head(v, validity_logit=1.0)
    assert curiosity(head, np.ones(3), v, 10.0, np.random.default_rng(0)) == pytest.approx(0.0)


def test_disabled_gate_and_zero_variance():
    head = _fixed_head([1.0, 0.0], validity_logit=0.7)
    cfg = DynamicsConfig(gate_beta=0.0, dropout=0.0)
    r = curiosity(head, np.ones(3), np.array([0.0, 1.0]), 10.0, np.random.default_rng(0), cfg)
    assert r == pytest.approx(1.5 * expit(0.7))
    r = curiosity(head, np.ones(3), np.array([0.0, 1.0]), 1.0, np.random.default_rng(0), cfg)
    assert r == pytest.approx(1.0 * expit(0.7))


def test_mc_samples_identical_without_dropout():
    rng = np.random.default_rng(0)
    head = DynamicsHead(Mlp.init([4, 8, 3], rng, dropout=0.0), 2, trained=True)
    terms = curiosity_terms(head, rng.normal(size=(6, 4)), rng.normal(size=(6, 2)), rng, mc_samples=4)
    assert np.all(terms.variance == 0.0)


def test_gated_reward_bounded_and_monotone_in_variance():
    error = np.full(6, 2.0)
    variance = np.array([0.0, 0.1, 0.2, 0.5, 1.0, 3.0])
    terms = CuriosityTerms(error, variance, np.zeros(6))
    r = gated_reward(terms, beta=5.0, p95=1.5)
    assert np.all(r >= 0.0) and np.all(r <= 1.5)
    assert np.all(np.diff(r) <= 1e-12)


def test_curiosity_batch_is_capped_by_batch_p95():
    rng = np.random.default_rng(5)
    head = DynamicsHead(Mlp.init([4, 8, 3], rng, dropout=0.1), 2, trained=True)
    X, Y = rng.normal(size=(40, 4)), rng.normal(size=(40, 2))
    r = curiosity_batch(head, X, Y, rng, DynamicsConfig())
    assert r.shape == (40,)
    assert np.all(r >= 0.0)


def test_untrained_head_is_refused():
    head = _fixed_head([0.0, 1.0])
    head.trained = False
    with pytest.raises(ValueError):
        curiosity(head, np.ones(3), np.ones(2), 1.0, np.random.default_rng(0))


def test_gate_sweep_covers_grid():
    head = _fixed_head([1.0, 0.0], dropout=0.1)
    rows = gate_sweep(head, np.ones((4, 3)), np.tile([0.0, 1.0], (4, 1)))
    assert len(rows) == 16
    assert {r["beta"] for r in rows} == {0.0, 2.5, 5.0, 10.0}


# ---------------------------------------------------------------------------------
# train_dynamics
# ---------------------------------------------------------------------------------

def test_dynamics_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    head = DynamicsHead(Mlp.init([5, 6, 4], rng), 3)
    X, Y = rng.normal(size=(8, 5)), rng.normal(size=(8, 3))
    R = (rng.random(8) < 0.5).astype(float)
    _, _, d_w, d_b = dynamics_loss(head, X, Y, R)
    eps = 1e-6
    for layer, idx in ((0, (2, 3)), (1, (5, 1)), (1, (0, 3))):
        hi, lo = head.mlp.copy(), head.mlp.copy()
        hi.weights[layer][idx] += eps
        lo.weights[layer][idx] -= eps
        numeric = (dynamics_loss(DynamicsHead(hi, 3), X, Y, R)[0]
                   - dynamics_loss(DynamicsHead(lo, 3), X, Y, R)[0]) / (2 * eps)
        assert d_w[layer][idx] == pytest.approx(numeric, rel=1e-4, abs=1e-8)
    hi, lo = head.mlp.copy(), head.mlp.copy()
    hi.biases[1][3] += eps
    lo.biases[1][3] -= eps
    numeric = (dynamics_loss(DynamicsHead(hi, 3), X, Y, R)[0]
               - dynamics_loss(DynamicsHead(lo, 3), X, Y, R)[0]) / (2 * eps)
    assert d_b[1][3] == pytest.approx(numeric, rel=1e-4, abs=1e-8)


def test_linear_dynamics_are_learned():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(32, 5))
    A = rng.normal(scale=0.3, size=(5, 3))
    Y = X @ A
    R = np.ones(32)
    cfg = DynamicsConfig(hidden=(), dropout=0.0, lr=0.05, epochs=600, batch_size=64)
    head = train_dynamics(X, Y, R, cfg, seed=1)
    _, parts, _, _ = dynamics_loss(head, X, Y, R)
    assert head.trained
    assert parts["smooth_l1"] < 1e-3
    assert parts["cosine"] < 1e-3
    assert parts["bce"] < 1e-2


def test_train_dynamics_errors():
    with pytest.raises(TrainingError):
        train_dynamics(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0), DynamicsConfig())
    X = np.full((4, 3), np.nan)
    with pytest.raises(TrainingError):
        train_dynamics(X, np.zeros((4, 2)), np.ones(4), DynamicsConfig(hidden=(4,), epochs=1))


# ---------------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------------

def test_visual_summary_is_a_distribution_and_dilates_small_footprints():
    clip = generate_clip(WorldConfig(), 3)
    v = visual_summary(clip, Footprint(clip.full_rect(), 0, clip.n_frames - 1))
    assert v.shape == (clip.world.n_codes,)
    assert v.sum() == pytest.approx(1.0)

    small = visual_summary(clip, Footprint(Rect(10, 10, 1, 1), 0, 0))
    block = clip.frames[0, 9:12, 9:12].reshape(-1)
    expected = np.bincount(block, minlength=clip.world.n_codes) / 9.0
    assert small == pytest.approx(expected)


def test_hash_tokens_deterministic_unit_norm():
    a = hash_tokens(["SEG", "SEG(3)"], 8)
    assert a == pytest.approx(hash_tokens(["SEG", "SEG(3)"], 8))
    assert np.linalg.norm(a) == pytest.approx(1.0)
    assert not hash_tokens([], 8).any()


def test_frozen_encoder_is_seed_deterministic():
    clip = generate_clip(WorldConfig(), 1)
    query = make_query(clip, "temporal", make_rng(0))
    trace = generate_teacher_traces(clip, query, 1)[0]
    pairs = trace_pairs(trace)
    d_in = input_dim(clip.world.n_codes)
    rows = step_inputs(clip, pairs)
    assert rows.shape == (len(pairs), d_in)

    a = FrozenEncoder.build(d_in, 16, seed=9).encode_steps(clip, pairs)
    b = FrozenEncoder.build(d_in, 16, seed=9).encode_steps(clip, pairs)
    assert np.array_equal(a, b)
    assert np.linalg.norm(a, axis=1) == pytest.approx(np.ones(len(pairs)))

    X, Y, R = transition_rows(clip, pairs)
    assert len(X) == len(trace.steps) and Y.shape[1] == clip.world.n_codes
    assert set(R.tolist()) <= {0.0, 1.0}
