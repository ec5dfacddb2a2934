# src/test_index.py

import numpy as np
import pytest

from config import IndexConfig, WorldConfig
from index.audit import audit_leakage, clopper_pearson
from index.dedup import IngestGate, Media, dedup_pair, eroded_overlap, hamming, phash, ssim
from index.ivfpq import IvfPqIndex
from index.keys import HybridKey, build_keys, key_similarity, pixel_encoder
from toyworld.scene import Footprint, Query, Rect, generate_clip
from toyworld.tools import Observation, ToolCall
from utils.errors import ConfigError, ProtocolError
from utils.seeding import make_rng

ALL_ONES = (1 << 64) - 1


def _unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _random_keys(n, seed=0, dim=32):
    rng = np.random.default_rng(seed)
    text, pixel = _unit_rows(rng, n, dim), _unit_rows(rng, n, dim)
    return [HybridKey(text[i], pixel[i], f"k{i}") for i in range(n)]


# ---------------------------------------------------------------------------------
# КЛЮЧИ
# ---------------------------------------------------------------------------------

def test_build_keys_deterministic_and_unit():
    cfg = IndexConfig()
    world = WorldConfig()
    clip = generate_clip(world, 5)
    enc = pixel_encoder(world.n_codes, cfg)
    query = Query("q0", "attribute", 0, 0, 1)
    obs = [Observation("ZOOM", {}, True, Footprint(Rect(0, 0, 16, 16), 0, 3))]
    calls = [ToolCall("ZOOM", 0)]
    a = build_keys(clip, query, obs, enc, cfg, calls)
    b = build_keys(clip, query, obs, enc, cfg, calls)
    assert np.array_equal(a.vector, b.vector)
    assert np.linalg.norm(a.text) == pytest.approx(1.0)
    assert np.linalg.norm(a.pixel) == pytest.approx(1.0)
    assert a.footprints == [[0, 0, 16, 16, 0, 3]]
    assert key_similarity(a, b, 0.5) == pytest.approx(1.0)


def test_near_full_crop_is_closer_than_other_clip_on_average():
    cfg = IndexConfig()
    world = WorldConfig()
    enc = pixel_encoder(world.n_codes, cfg)
    query = Query("q0", "attribute", 0, 0, 1)
    crop_sims, other_sims = [], []
    for seed in range(100):
        clip = generate_clip(world, seed)
        other = generate_clip(world, 10_000 + seed)
        full = build_keys(clip, query, [], enc, cfg)
        crop_obs = [Observation("ZOOM", {}, True, Footprint(Rect(1, 1, 30, 30), 0, world.frames - 1))]
        crop = build_keys(clip, query, crop_obs, enc, cfg)
        far = build_keys(other, query, [], enc, cfg)
        crop_sims.append(key_similarity(full, crop, 1.0))
        other_sims.append(key_similarity(full, far, 1.0))
    assert np.mean(crop_sims) > np.mean(other_sims)


# ---------------------------------------------------------------------------------
# IVF-PQ
# ---------------------------------------------------------------------------------

def test_key_dim_must_divide_into_subquantizers():
    with pytest.raises(ConfigError) as err:
        IvfPqIndex(IndexConfig(text_dim=30, pixel_dim=32, m=8))
    assert err.value.field == "index.m"


def test_small_index_returns_self_first():
    keys = _random_keys(50)
    index = IvfPqIndex(IndexConfig()).build(keys)
    assert not index.trained
    for key in keys[:10]:
        top = index.search(key, 0.5, 3)
        assert top[0].id == key.source_id
        assert top[0].score == pytest.approx(1.0, abs=1e-5)


def test_incremental_adds_train_once_threshold_is_reached():
    keys = _random_keys(40, seed=3)
    index = IvfPqIndex(IndexConfig(min_train=32)).build(keys[:20])
    assert not index.trained
    for key in keys[20:31]:
        index.add(key)
    assert not index.trained and len(index) == 31
    assert index.add(keys[31])
    assert index.trained
    for key in keys[32:]:
        index.add(key)
    assert len(index) == 40
    for key in keys[:5] + keys[35:]:
        assert index.search(key, 0.5, 1)[0].id == key.source_id


def test_text_only_search_matches_exact_ranking():
    keys = _random_keys(50, seed=1)
    index = IvfPqIndex(IndexConfig()).build(keys)
    query = _random_keys(1, seed=99)[0]
    got = [nb.id for nb in index.search(query, 0.0, 10)]
    text = np.stack([k.text for k in keys])
    expected = [keys[i].source_id for i in np.argsort(-(text @ query.text))[:10]]
    assert got == expected


def test_search_rejects_bad_arguments_and_caps_k():
    index = IvfPqIndex(IndexConfig())
    with pytest.raises(ValueError):
        index.search(_random_keys(1)[0], 0.5, 3)
    index.build(_random_keys(5))
    with pytest.raises(ValueError):
        index.search(_random_keys(1)[0], 1.5, 3)
    assert len(index.search(_random_keys(1)[0], 0.5, 50)) == 5


def _clustered(n_clusters=500, per_cluster=20, noise=0.02, seed=0):
    rng = np.random.default_rng(seed)
    text_c, pixel_c = _unit_rows(rng, n_clusters, 32), _unit_rows(rng, n_clusters, 32)
    keys = []
    for c in range(n_clusters):
        for j in range(per_cluster):
            t = text_c[c] + noise * rng.normal(size=32)
            p = pixel_c[c] + noise * rng.normal(size=32)
            keys.append(HybridKey(t / np.linalg.norm(t), p / np.linalg.norm(p), f"c{c}-{j}"))
    return keys, rng


def test_ivfpq_recall_on_clustered_keys():
    keys, rng = _clustered()
    index = IvfPqIndex(IndexConfig(n_list=64, m=8, n_probe=8)).build(keys)
    assert index.trained
    data = np.stack([k.vector for k in keys])
    recalls = []
    for i in rng.choice(len(keys), size=200, replace=False):
        t = keys[i].text + 0.005 * rng.normal(size=32)
        p = keys[i].pixel + 0.005 * rng.normal(size=32)
        query = HybridKey(t / np.linalg.norm(t), p / np.linalg.norm(p), "q")
        truth = {keys[j].source_id for j in np.argsort(-(data @ query.weighted(0.5)))[:10]}
        got = {nb.id for nb in index.search(query, 0.5, 10)}
        recalls.append(len(truth & got) / 10)
    assert np.mean(recalls) >= 0.9


def test_pq_reconstruction_error_is_small():
    keys, _ = _clustered(n_clusters=100, per_cluster=20, seed=3)
    index = IvfPqIndex(IndexConfig()).build(keys)
    errors = [
        np.linalg.norm(index.decoded(k.source_id) - k.vector) / np.linalg.norm(k.vector)
        for k in keys[:200]
    ]
    assert np.mean(errors) < 0.5


def test_whitelist_is_absolute():
    keys = _random_keys(40)
    index = IvfPqIndex(IndexConfig()).build(keys)
    removed = index.install_whitelist(["k0", "k1", "probe-x"])
    assert removed == 2
    assert "k0" not in index and len(index) == 38
    assert not index.add(keys[0])
    for key in keys[:5]:
        assert all(nb.id not in index.whitelist for nb in index.search(key, 0.5, 40))


def test_whitelist_breach_is_a_protocol_error():
    index = IvfPqIndex(IndexConfig()).build(_random_keys(5))
    index.whitelist.add("k2")
    with pytest.raises(ProtocolError):
        index.assert_whitelist()


def test_blocklist_and_duplicate_ids_are_refused():
    keys = _random_keys(3)
    index = IvfPqIndex(IndexConfig())
    index.block("k1")
    assert index.add(keys[0]) and not index.add(keys[0]) and not index.add(keys[1])
    assert index.stored_ids() == ["k0"]


@pytest.mark.parametrize("n", [30, 300])
def test_index_save_load_gives_identical_results(tmp_path, n):
    keys = _random_keys(n, seed=7)
    index = IvfPqIndex(IndexConfig()).build(keys)
    index.install_whitelist(["k3"])
    path = index.save(tmp_path / "index.bin")
    loaded = IvfPqIndex.load(path)
    assert loaded.trained == index.trained
    assert loaded.whitelist == {"k3"}
    for key in keys[:5]:
        a = [(nb.id, round(nb.score, 6)) for nb in index.search(key, 0.3, 5)]
        b = [(nb.id, round(nb.score, 6)) for nb in loaded.search(key, 0.3, 5)]
        assert a == b


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not an index at all")
    with pytest.raises(ValueError):
        IvfPqIndex.load(path)


# ---------------------------------------------------------------------------------
# PHASH / SSIM
# ---------------------------------------------------------------------------------

def test_phash_identical_and_brightness_shift():
    frame = np.random.default_rng(0).integers(0, 8, size=(32, 32))
    assert hamming(phash(frame), phash(frame.copy())) == 0
    assert hamming(phash(frame), phash(frame + 1)) <= 8
    assert phash(frame) & 1 == 0


def test_phash_random_pairs_average_half_the_bits():
    rng = make_rng(0, "phash")
    dists = [
        hamming(phash(rng.integers(0, 8, size=(32, 32))), phash(rng.integers(0, 8, size=(32, 32))))
        for _ in range(1000)
    ]
    assert 29 <= np.mean(dists) <= 35


def test_phash_rejects_tiny_frames():
    with pytest.raises(ValueError):
        phash(np.zeros((4, 4)))


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.integers(0, 8, size=(32, 32)), rng.integers(0, 8, size=(32, 32))
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, b) == pytest.approx(ssim(b, a))
    assert ssim(a, b) < 0.5


def _square(x, y, size=14, value=5):
    frame = np.zeros((32, 32), dtype=int)
    frame[y:y + size, x:x + size] = value
    return frame


def test_eroded_overlap_of_disjoint_and_nested_objects():
    assert eroded_overlap(_square(1, 1), _square(17, 17)) == 0.0
    assert eroded_overlap(_square(1, 1), _square(1, 1, size=10)) == pytest.approx(1.0)


# ---------------------------------------------------------------------------------
# DEDUP
# ---------------------------------------------------------------------------------

def test_identical_media_are_duplicates():
    frame = np.random.default_rng(2).integers(0, 8, size=(32, 32))
    a = Media("a", frame, np.eye(4)[0])
    b = Media("b", frame, np.eye(4)[0])
    verdict = dedup_pair(a, b)
    assert verdict.duplicate and verdict.stage == "phash" and verdict.hamming == 0


def test_ssim_confirms_embedding_match():
    frame = _square(4, 4)
    a = Media("a", frame, np.eye(4)[0], hashes=[0])
    b = Media("b", frame, np.eye(4)[0], hashes=[ALL_ONES])
    verdict = dedup_pair(a, b)
    assert verdict.duplicate and verdict.stage == "ssim"


def test_shared_template_with_disjoint_objects_is_distinct():
    a = Media("a", _square(1, 1), np.eye(4)[0], hashes=[0])
    b = Media("b", _square(17, 17), np.eye(4)[0], hashes=[ALL_ONES])
    verdict = dedup_pair(a, b)
    assert not verdict.duplicate
    assert verdict.stage == "template"
    assert verdict.ssim < 0.75


def test_low_cosine_is_distinct():
    a = Media("a", _square(1, 1), np.eye(4)[0], hashes=[0])
    b = Media("b", _square(1, 1), np.eye(4)[1], hashes=[ALL_ONES])
    verdict = dedup_pair(a, b)
    assert not verdict.duplicate and verdict.stage == "embedding"


def _clip_pair(n_positive):
    frames = np.zeros((8, 32, 32), dtype=int)
    emb = np.eye(16)
    a = Media("a", frames, emb[:8], hashes=[0] * 8)
    b_emb = np.vstack([emb[:n_positive], emb[8:16 - n_positive]])
    b = Media("b", frames, b_emb, hashes=[0] * n_positive + [ALL_ONES] * (8 - n_positive))
    return a, b


def test_clip_with_five_of_eight_positive_frames_is_distinct():
    a, b = _clip_pair(5)
    verdict = dedup_pair(a, b)
    assert verdict.positive_rate == pytest.approx(0.625)
    assert not verdict.duplicate


def test_clip_with_six_of_eight_positive_frames_is_duplicate():
    a, b = _clip_pair(6)
    assert dedup_pair(a, b).duplicate


def test_dedup_is_symmetric():
    rng = np.random.default_rng(4)
    for i in range(20):
        frame = rng.integers(0, 8, size=(32, 32))
        other = frame.copy()
        other[rng.integers(0, 32, 10), rng.integers(0, 32, 10)] = 7
        e = _unit_rows(rng, 1, 8)[0]
        f = e + 0.2 * rng.normal(size=8)
        a, b = Media("a", frame, e), Media("b", other, f / np.linalg.norm(f))
        assert dedup_pair(a, b).duplicate == dedup_pair(b, a).duplicate


def test_dedup_refuses_image_against_clip():
    a = Media("a", np.zeros((32, 32)), np.eye(2)[0], hashes=[0])
    b = Media("b", np.zeros((2, 32, 32)), np.eye(2), hashes=[0, 0])
    with pytest.raises(ValueError):
        dedup_pair(a, b)


# ---------------------------------------------------------------------------------
# ПРИЁМ И АУДИТ
# ---------------------------------------------------------------------------------

def _media(rng, media_id):
    return Media(media_id, rng.integers(0, 8, size=(32, 32)), _unit_rows(rng, 1, 16)[0])


def test_ingest_gate_rejects_eval_copies_and_keeps_earliest():
    rng = np.random.default_rng(5)
    keys = {k.source_id: k for k in _random_keys(4)}
    ev = _media(rng, "k0")
    index = IvfPqIndex(IndexConfig())
    gate = IngestGate(index, [ev])

    leak = Media("k1", ev.frames, ev.embeddings)
    assert gate.ingest(leak, keys["k1"]) == "eval_duplicate"
    first = _media(rng, "k2")
    assert gate.ingest(first, keys["k2"]) == "accepted"
    copy = Media("k3", first.frames, first.embeddings)
    assert gate.ingest(copy, keys["k3"]) == "duplicate"

    assert index.stored_ids() == ["k2"]
    assert {"k1", "k3"} <= index.blocklist
    assert "k0" in index.whitelist
    assert not index.add(keys["k0"])
    assert [row["status"] for row in gate.log] == ["eval_duplicate", "accepted", "duplicate"]


def test_clopper_pearson_reference_values():
    low, high = clopper_pearson(0, 50)
    assert low == 0.0
    assert high == pytest.approx(0.0711, abs=1e-3)
    assert clopper_pearson(50, 50)[1] == 1.0
    low, high = clopper_pearson(7, 20)
    assert low < 7 / 20 < high
    narrow = clopper_pearson(100, 200)
    wide = clopper_pearson(10, 20)
    assert narrow[1] - narrow[0] < wide[1] - wide[0]
    with pytest.raises(ValueError):
        clopper_pearson(0, 0)


def test_audit_finds_planted_leak():
    rng = np.random.default_rng(6)
    ev = [_media(rng, f"e{i}") for i in range(3)]
    stored = [_media(rng, f"s{i}") for i in range(10)]
    stored.append(Media("s-leak", ev[1].frames, ev[1].embeddings))
    report = audit_leakage(stored, ev, IndexConfig(), sample=5)
    assert report.exact_overlaps == 1
    assert report.near_duplicates >= 1
    assert report.inspected == 5
    assert report.pairs[0]["stored"] == "s-leak"
    assert report.confirmed >= 1
    assert report.ci_low <= report.rate <= report.ci_high
    assert "leak rate" in report.to_text()
