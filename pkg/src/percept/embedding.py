# src/percept/embedding.py

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from percept.mlp import Mlp, MlpCache
from utils.logger import get_logger
from utils.seeding import make_rng

logger = get_logger("pixelsoul-percept")

LN_EPS = 1e-5


@dataclass
class StepEmbedding:
    vector: np.ndarray
    step: int = 0


@dataclass
class Projector:
    """g_φ: [v ‖ x ‖ onehot] → 768 → GELU → 512 → (LayerNorm) → L2."""
    mlp: Mlp
    layernorm: bool = True

    @staticmethod
    def init(in_dim: int, hidden: int = 768, out_dim: int = 512, seed: int = 0,
             layernorm: bool = True) -> "Projector":
        return Projector(Mlp.init([in_dim, hidden, out_dim], make_rng(seed, "projector")), layernorm)

    @staticmethod
    def linear(matrix: np.ndarray) -> "Projector":
        """Чисто линейный проектор (для ручных проверок на маленьких размерностях)."""
        m = np.asarray(matrix, dtype=float)
        return Projector(Mlp([m], [np.zeros(m.shape[1])]), layernorm=False)

    @property
    def in_dim(self) -> int:
        return self.mlp.in_dim

    @property
    def out_dim(self) -> int:
        return self.mlp.out_dim

    def copy(self) -> "Projector":
        return Projector(self.mlp.copy(), self.layernorm)


@dataclass
class EmbedCache:
    mlp: MlpCache
    ln_out: np.ndarray      # выход LayerNorm (или сырой выход MLP)
    ln_std: np.ndarray
    norms: np.ndarray
    fallback: np.ndarray    # строки, ушедшие в e0


def embed_inputs(proj: Projector, rows: np.ndarray) -> Tuple[np.ndarray, EmbedCache]:
    """Пакетная проекция; каждая строка выхода имеет единичную L2-норму."""
    rows = np.atleast_2d(rows)
    if rows.shape[1] != proj.in_dim:
        raise ValueError(f"Projector: вход {rows.shape[1]} ≠ {proj.in_dim}")
    z, cache = proj.mlp.forward(rows)
    std = np.ones((len(z), 1))
    if proj.layernorm:
        mu = z.mean(axis=1, keepdims=True)
        std = np.sqrt(z.var(axis=1, keepdims=True) + LN_EPS)
        z = (z - mu) / std
    norms = np.linalg.norm(z, axis=1)
    fallback = norms <= 1e-12
    out = np.zeros_like(z)
    ok = ~fallback
    out[ok] = z[ok] / norms[ok, None]
    if fallback.any():
        logger.warning(f"Projector: {int(fallback.sum())} zero vector(s), falling back to e0")
        out[fallback, 0] = 1.0
    return out, EmbedCache(cache, z, std, norms, fallback)


def embed_step(v: np.ndarray, x: np.ndarray, prev_action: np.ndarray, proj: Projector, step: int = 0) -> StepEmbedding:
    row = np.concatenate([np.ravel(v), np.ravel(x), np.ravel(prev_action)])
    out, _ = embed_inputs(proj, row[None, :])
    return StepEmbedding(out[0], step)


def projector_vjp(proj: Projector, cache: EmbedCache, d_out: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """
    Обратный проход до параметров проектора. Входы считаются константами:
    градиент в признаки шагов не течёт.
    """
    E = np.zeros_like(cache.ln_out)
    ok = ~cache.fallback
    E[ok] = cache.ln_out[ok] / cache.norms[ok, None]
    # через L2-нормировку
    d = np.zeros_like(d_out)
    d[ok] = (d_out[ok] - E[ok] * np.sum(E[ok] * d_out[ok], axis=1, keepdims=True)) / cache.norms[ok, None]
    if proj.layernorm:
        y = cache.ln_out
        d = (d - d.mean(axis=1, keepdims=True) - y * np.mean(d * y, axis=1, keepdims=True)) / cache.ln_std
    d_w, d_b, _ = proj.mlp.backward(cache.mlp, d)
    return d_w, d_b


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def adjacent_cosines(embeddings: np.ndarray) -> np.ndarray:
    """cos(E_t, E_{t−1}) для t = 1..T."""
    E = np.atleast_2d(embeddings)
    if len(E) < 2:
        return np.zeros(0)
    return np.array([cosine(E[t], E[t - 1]) for t in range(1, len(E))])
