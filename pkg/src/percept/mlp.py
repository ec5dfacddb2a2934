# src/percept/mlp.py

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(z: np.ndarray) -> np.ndarray:
    """Точная GELU: z·Φ(z)."""
    return z * ndtr(z)


def gelu_grad(z: np.ndarray) -> np.ndarray:
    return ndtr(z) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


@dataclass
class MlpCache:
    inputs: List[np.ndarray] = field(default_factory=list)   # вход каждого линейного слоя
    pre: List[np.ndarray] = field(default_factory=list)      # пре-активации скрытых слоёв
    masks: List[Optional[np.ndarray]] = field(default_factory=list)


@dataclass
class Mlp:
    """Полносвязная сеть: Linear → GELU → Dropout → ... → Linear."""
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    dropout: float = 0.0

    @staticmethod
    def init(sizes: Sequence[int], rng: np.random.Generator, dropout: float = 0.0) -> "Mlp":
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out)))
            biases.append(np.zeros(n_out))
        return Mlp(weights, biases, dropout)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.dropout)

    def forward(self, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, MlpCache]:
        """rng включает dropout (обучение и MC-сэмплы); без rng сеть детерминирована."""
        cache = MlpCache()
        h = np.atleast_2d(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            cache.inputs.append(h)
            z = h @ w + b
            if i == last:
                return z, cache
            cache.pre.append(z)
            h = gelu(z)
            mask = None
            if rng is not None and self.dropout > 0:
                keep = 1.0 - self.dropout
                mask = (rng.random(h.shape) < keep) / keep
                h = h * mask
            cache.masks.append(mask)
        return h, cache

    def backward(self, cache: MlpCache, d_out: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray], np.ndarray]:
        """Возвращает (dW по слоям, db по слоям, d вход)."""
        d_w: List[np.ndarray] = [None] * len(self.weights)
        d_b: List[np.ndarray] = [None] * len(self.weights)
        d = d_out
        for i in range(len(self.weights) - 1, -1, -1):
            d_w[i] = cache.inputs[i].T @ d
            d_b[i] = d.sum(axis=0)
            d = d @ self.weights[i].T
            if i > 0:
                if cache.masks[i - 1] is not None:
                    d = d * cache.masks[i - 1]
                d = d * gelu_grad(cache.pre[i - 1])
        return d_w, d_b, d

    def step(self, d_w: List[np.ndarray], d_b: List[np.ndarray], lr: float) -> "Mlp":
        return Mlp(
            [w - lr * g for w, g in zip(self.weights, d_w)],
            [b - lr * g for b, g in zip(self.biases, d_b)],
            self.dropout,
        )


def grad_norm(*groups: List[np.ndarray]) -> float:
    return float(np.sqrt(sum(np.sum(g ** 2) for group in groups for g in group)))


# ---------------------------------------------------------------------------------
# ОПТИМИЗАТОР
# ---------------------------------------------------------------------------------

@dataclass
class Adam:
    """Adam над списком массивов; lr линейно затухает до нуля за total_steps шагов."""
    lr: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def update(self, grads: List[np.ndarray]) -> List[np.ndarray]:
        """Возвращает шаги, которые нужно вычесть из параметров."""
        if not self.m:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        self.t += 1
        lr = self.lr * max(0.0, 1.0 - (self.t - 1) / max(self.total_steps, 1))
        steps = []
        for i, g in enumerate(grads):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            steps.append(lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return steps
