# src/test_data_layer.py

import json

import numpy as np
import pytest

from config import DynamicsConfig, WorldConfig
from data_layer.checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from data_layer.run_store import RunStore, file_sha256, make_trace_id
from layout_engine.plot_export import parse_series, render_series
from percept.dynamics import DynamicsHead
from percept.embedding import Projector
from policy.features import ActionSpace, FeatureLayout
from policy.model import init_policy
from policy.sft import AuxHeads, TokenNormalizer
from utils.errors import DependencyError, ReplayError

WORLD = WorldConfig()


def _store(tmp_path):
    return RunStore(str(tmp_path), make_trace_id("ab" * 32))


# ---------------------------------------------------------------------------------
# RUN STORE
# ---------------------------------------------------------------------------------

def test_trace_id_format():
    assert make_trace_id("0123456789abcdef" * 4) == "PXS-0123456789ab"


def test_second_write_gets_suffix_and_latest_follows(tmp_path):
    store = _store(tmp_path)
    first = store.write_json("report.json", {"a": 1})
    second = store.write_json("report.json", {"a": 2})
    assert first.name == "report.json"
    assert second.name == "report.json.1"
    assert json.loads(first.read_text(encoding="utf-8")) == {"a": 1}
    assert store.latest("report.json") == second
    assert store.read_json("report.json") == {"a": 2}


def test_require_missing_is_dependency_error(tmp_path):
    with pytest.raises(DependencyError):
        _store(tmp_path).require("sft.npz", "TTRL")


def test_stream_header_and_records(tmp_path):
    store = _store(tmp_path)
    path = store.start_stream("log.jsonl", "pixelsoul.test", {"seed": 3})
    store.append(path, {"step": 0, "kl": 0.5})
    store.append(path, {"step": 1, "kl": 0.25})
    header, records = store.read_stream(path, "pixelsoul.test")
    assert header["schema"] == "pixelsoul.test"
    assert header["seed"] == 3
    assert [r["step"] for r in records] == [0, 1]


def test_stream_schema_mismatch_is_replay_error(tmp_path):
    store = _store(tmp_path)
    path = store.write_stream("log.jsonl", "pixelsoul.a", [{"x": 1}])
    with pytest.raises(ReplayError):
        store.read_stream(path, "pixelsoul.b")


def test_stream_version_mismatch_is_replay_error(tmp_path):
    path = tmp_path / "old.jsonl"
    path.write_text(json.dumps({"schema": "pixelsoul.ttrl", "version": 999}) + "\n", encoding="utf-8")
    with pytest.raises(ReplayError):
        RunStore.iter_stream(path, "pixelsoul.ttrl")


def test_stream_without_header_is_replay_error(tmp_path):
    path = tmp_path / "bare.jsonl"
    path.write_text('{"step": 0}\n', encoding="utf-8")
    with pytest.raises(ReplayError):
        RunStore.iter_stream(path)


def test_corrupt_line_is_replay_error(tmp_path):
    store = _store(tmp_path)
    path = store.write_stream("log.jsonl", "pixelsoul.a", [{"x": 1}])
    with open(path, "a", encoding="utf-8") as fh:
        fh.write("{not json\n")
    with pytest.raises(ReplayError):
        store.read_stream(path, "pixelsoul.a")


def test_missing_log_is_replay_error(tmp_path):
    with pytest.raises(ReplayError):
        RunStore.iter_stream(tmp_path / "nope.jsonl")


def test_file_sha256_changes_with_content(tmp_path):
    a = tmp_path / "a.txt"
    a.write_text("one", encoding="utf-8")
    h1 = file_sha256(a)
    a.write_text("two", encoding="utf-8")
    assert file_sha256(a) != h1
    assert len(h1) == 64


# ---------------------------------------------------------------------------------
# ЧЕКПОИНТЫ
# ---------------------------------------------------------------------------------

def _full_checkpoint():
    layout = FeatureLayout.for_world(WORLD)
    policy = init_policy(layout, ActionSpace(WORLD.frames), WORLD.n_answers, seed=7, temperature=0.8)
    heads = AuxHeads.init(layout.dim, WORLD.glyph_alphabet, WORLD.frames, np.random.default_rng(1))
    projector = Projector.init(12, 8, 4, seed=2, layernorm=True)
    dyn_cfg = DynamicsConfig(hidden=(8,), dropout=0.2)
    dynamics = DynamicsHead.init(12, 5, dyn_cfg, seed=3)
    normalizer = TokenNormalizer(logp_mean=-1.5, logp_var=0.4, entropy_mean=0.9, entropy_var=0.1, count=17)
    return Checkpoint(policy, heads, projector, dynamics, normalizer, {"ZOOM": 0.5, "OCR": 1.25}, stage="rft")


def test_checkpoint_bit_exact_restore(tmp_path):
    ckpt = _full_checkpoint()
    path = save_checkpoint(tmp_path / "rft.npz", ckpt)
    back = load_checkpoint(path)

    assert back.stage == "rft"
    assert np.array_equal(back.policy.w_act, ckpt.policy.w_act)
    assert np.array_equal(back.policy.w_ans, ckpt.policy.w_ans)
    assert np.array_equal(back.policy.answer_index, ckpt.policy.answer_index)
    assert back.policy.temperature == 0.8
    for k, v in ckpt.heads.arrays().items():
        assert np.array_equal(back.heads.arrays()[k], v)
    for a, b in zip(back.projector.mlp.weights + back.projector.mlp.biases,
                    ckpt.projector.mlp.weights + ckpt.projector.mlp.biases):
        assert np.array_equal(a, b)
    assert back.projector.layernorm is True
    assert back.dynamics.v_dim == 5
    assert back.dynamics.mlp.dropout == pytest.approx(0.2)
    assert len(back.dynamics.mlp.weights) == len(ckpt.dynamics.mlp.weights)
    assert back.normalizer == ckpt.normalizer
    assert back.tool_scalers == {"ZOOM": 0.5, "OCR": 1.25}


def test_policy_only_checkpoint(tmp_path):
    ckpt = _full_checkpoint()
    path = save_checkpoint(tmp_path / "ttrl.npz", Checkpoint(ckpt.policy, stage="ttrl"))
    back = load_checkpoint(path)
    assert back.heads is None
    assert back.projector is None
    assert back.dynamics is None
    assert back.normalizer is None


def test_checkpoint_is_never_overwritten(tmp_path):
    ckpt = _full_checkpoint()
    path = save_checkpoint(tmp_path / "sft.npz", ckpt)
    with pytest.raises(FileExistsError):
        save_checkpoint(path, ckpt)


def test_checkpoint_missing_is_dependency_error(tmp_path):
    with pytest.raises(DependencyError):
        load_checkpoint(tmp_path / "absent.npz")


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "future.npz"
    np.savez(path, meta=np.asarray(json.dumps({"version": 99})))
    with pytest.raises(DependencyError):
        load_checkpoint(path)


# ---------------------------------------------------------------------------------
# ЧИСЛОВЫЕ СЕРИИ ДЛЯ ГРАФИКОВ
# ---------------------------------------------------------------------------------

def test_series_text_reads_back_exact_floats():
    value = 0.1 + 0.2
    text = render_series(("x", "y"), [(1, value)], {"series": "demo"})
    meta, columns, rows = parse_series(text)
    assert meta == {"series": "demo"}
    assert columns == ["x", "y"]
    assert rows[0][1] == value


def test_empty_series_is_flagged():
    meta, columns, rows = parse_series(render_series(("x",), []))
    assert meta.get("empty") == "true"
    assert columns == ["x"]
    assert rows == []
