# src/data_layer/checkpoints.py

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from percept.dynamics import DynamicsHead
from percept.embedding import Projector
from percept.mlp import Mlp
from policy.model import PolicyParams
from policy.sft import AuxHeads, TokenNormalizer
from utils.errors import DependencyError

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """Всё, что стадия передаёт следующей: политика и (по необходимости) головы, проектор, динамика."""
    policy: PolicyParams
    heads: Optional[AuxHeads] = None
    projector: Optional[Projector] = None
    dynamics: Optional[DynamicsHead] = None
    normalizer: Optional[TokenNormalizer] = None
    tool_scalers: Dict[str, float] = field(default_factory=dict)
    stage: str = ""


def _put_mlp(out: Dict[str, np.ndarray], prefix: str, mlp: Mlp) -> None:
    out[f"{prefix}.n_layers"] = np.asarray(len(mlp.weights))
    out[f"{prefix}.dropout"] = np.asarray(mlp.dropout)
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b


def _get_mlp(data, prefix: str) -> Mlp:
    n = int(data[f"{prefix}.n_layers"])
    weights: List[np.ndarray] = [data[f"{prefix}.w{i}"] for i in range(n)]
    biases: List[np.ndarray] = [data[f"{prefix}.b{i}"] for i in range(n)]
    return Mlp(weights, biases, float(data[f"{prefix}.dropout"]))


def save_checkpoint(path: Path, ckpt: Checkpoint) -> Path:
    """Один .npz без pickle: массивы как есть, мелочь — JSON-строкой в поле meta."""
    path = Path(path)
    if path.exists():
        raise FileExistsError(f"Checkpoint: {path} уже существует")
    arrays: Dict[str, np.ndarray] = {
        "policy.w_act": ckpt.policy.w_act,
        "policy.w_ans": ckpt.policy.w_ans,
        "policy.answer_index": ckpt.policy.answer_index,
    }
    if ckpt.heads is not None:
        arrays.update({f"heads.{k}": v for k, v in ckpt.heads.arrays().items()})
    if ckpt.projector is not None:
        _put_mlp(arrays, "projector", ckpt.projector.mlp)
    if ckpt.dynamics is not None:
        _put_mlp(arrays, "dynamics", ckpt.dynamics.mlp)
    meta = {
        "version": CHECKPOINT_VERSION,
        "stage": ckpt.stage,
        "temperature": ckpt.policy.temperature,
        "projector_layernorm": ckpt.projector.layernorm if ckpt.projector is not None else None,
        "dynamics": {"v_dim": ckpt.dynamics.v_dim, "trained": ckpt.dynamics.trained} if ckpt.dynamics else None,
        "normalizer": asdict(ckpt.normalizer) if ckpt.normalizer is not None else None,
        "tool_scalers": ckpt.tool_scalers,
    }
    arrays["meta"] = np.asarray(json.dumps(meta, sort_keys=True))
    with open(path, "xb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"Checkpoint: файл не найден: {path}")
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise DependencyError(f"Checkpoint: формат v{meta.get('version')} не поддерживается")
        policy = PolicyParams(
            data["policy.w_act"], data["policy.w_ans"], data["policy.answer_index"], float(meta["temperature"]),
        )
        heads = None
        if "heads.w_box" in data.files:
            heads = AuxHeads(**{k: data[f"heads.{k}"] for k in ("w_box", "w_glyph", "w_mask", "w_temp")})
        projector = None
        if "projector.n_layers" in data.files:
            projector = Projector(_get_mlp(data, "projector"), bool(meta["projector_layernorm"]))
        dynamics = None
        if "dynamics.n_layers" in data.files:
            dynamics = DynamicsHead(_get_mlp(data, "dynamics"), int(meta["dynamics"]["v_dim"]),
                                    bool(meta["dynamics"]["trained"]))
    normalizer = TokenNormalizer(**meta["normalizer"]) if meta.get("normalizer") else None
    return Checkpoint(policy, heads, projector, dynamics, normalizer, dict(meta["tool_scalers"]), meta["stage"])
