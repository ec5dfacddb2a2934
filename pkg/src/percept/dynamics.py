# src/percept/dynamics.py

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from config import DynamicsConfig
from percept.mlp import Adam, Mlp, grad_norm
from utils.errors import TrainingError
from utils.logger import get_logger
from utils.seeding import make_rng

logger = get_logger("pixelsoul-percept")


@dataclass
class DynamicsHead:
    """Предсказатель [v_t ‖ x_t ‖ onehot(a_t)] → (v̂_{t+1}, r̂_t)."""
    mlp: Mlp
    v_dim: int
    trained: bool = False

    @staticmethod
    def init(in_dim: int, v_dim: int, cfg: DynamicsConfig, seed: int = 0) -> "DynamicsHead":
        sizes = [in_dim, *cfg.hidden, v_dim + 1]
        return DynamicsHead(Mlp.init(sizes, make_rng(seed, "dynamics"), dropout=cfg.dropout), v_dim)

    def predict(self, X: np.ndarray, rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
        out, _ = self.mlp.forward(X, rng)
        return out[:, :self.v_dim], out[:, self.v_dim]


# ---------------------------------------------------------------------------------
# ФУНКЦИЯ ПОТЕРЬ
# ---------------------------------------------------------------------------------

def _cos_rows(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Построчный косинус и его градиент по a (нулевой вектор → cos 0, градиент 0)."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    cos = np.zeros(len(a))
    grad = np.zeros_like(a)
    cos[ok] = np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])
    grad[ok] = b[ok] / (na[ok] * nb[ok])[:, None] - cos[ok][:, None] * a[ok] / (na[ok] ** 2)[:, None]
    return cos, grad


def dynamics_loss(
    head: DynamicsHead,
    X: np.ndarray,
    Y: np.ndarray,
    R: np.ndarray,
    weights: Sequence[float] = (0.5, 0.5, 1.0),
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, Dict[str, float], List[np.ndarray], List[np.ndarray]]:
    """
    λ1·SmoothL1(v̂, v) + λ2·(1 − cos(v̂, v)) + λ3·BCE(r̂, r).
    Возвращает (loss, части, dW, db).
    """
    l1, l2, l3 = weights
    out, cache = head.mlp.forward(X, rng)
    n, d = Y.shape
    v_hat, r_hat = out[:, :d], out[:, d]

    diff = v_hat - Y
    a = np.abs(diff)
    smooth = np.where(a < 1.0, 0.5 * diff * diff, a - 0.5)
    d_smooth = np.where(a < 1.0, diff, np.sign(diff)) / (n * d)

    cos, d_cos = _cos_rows(v_hat, Y)
    bce = np.logaddexp(0.0, r_hat) - R * r_hat

    parts = {
        "smooth_l1": float(smooth.mean()),
        "cosine": float((1.0 - cos).mean()),
        "bce": float(bce.mean()),
    }
    loss = l1 * parts["smooth_l1"] + l2 * parts["cosine"] + l3 * parts["bce"]

    d_out = np.zeros_like(out)
    d_out[:, :d] = l1 * d_smooth - l2 * d_cos / n
    d_out[:, d] = l3 * (expit(r_hat) - R) / n
    d_w, d_b, _ = head.mlp.backward(cache, d_out)
    return loss, parts, d_w, d_b


def train_dynamics(
    X: np.ndarray,
    Y: np.ndarray,
    R: np.ndarray,
    cfg: DynamicsConfig,
    seed: int = 0,
    head: Optional[DynamicsHead] = None,
) -> DynamicsHead:
    """Adam по мини-батчам, клиппинг градиента; нечисловой loss — TrainingError."""
    if len(X) == 0:
        raise TrainingError("Dynamics: пустой набор переходов")
    head = head or DynamicsHead.init(X.shape[1], Y.shape[1], cfg, seed)
    rng = make_rng(seed, "dynamics-train")
    n = len(X)
    steps_per_epoch = int(np.ceil(n / cfg.batch_size))
    opt = Adam(cfg.lr, cfg.epochs * steps_per_epoch)
    n_layers = len(head.mlp.weights)
    mlp = head.mlp

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, parts, d_w, d_b = dynamics_loss(replace(head, mlp=mlp), X[idx], Y[idx], R[idx],
                                                  cfg.loss_weights, rng)
            norm = grad_norm(d_w, d_b)
            if not np.isfinite(loss) or not np.isfinite(norm):
                raise TrainingError("Dynamics: loss разошёлся",
                                    {"epoch": epoch, "batch_start": start, "loss": loss, "grad_norm": norm})
            if cfg.grad_clip > 0 and norm > cfg.grad_clip:
                d_w = [g * cfg.grad_clip / norm for g in d_w]
                d_b = [g * cfg.grad_clip / norm for g in d_b]
            steps = opt.update(d_w + d_b)
            mlp = Mlp(
                [w - s for w, s in zip(mlp.weights, steps[:n_layers])],
                [b - s for b, s in zip(mlp.biases, steps[n_layers:])],
                mlp.dropout,
            )
    full, parts, _, _ = dynamics_loss(replace(head, mlp=mlp), X, Y, R, cfg.loss_weights)
    logger.info(f"Dynamics: trained on {n} transitions, loss={full:.5f} parts={parts}")
    return DynamicsHead(mlp, head.v_dim, trained=True)


# ---------------------------------------------------------------------------------
# ЛЮБОПЫТСТВО С ГЕЙТОМ НЕОПРЕДЕЛЁННОСТИ
# ---------------------------------------------------------------------------------

def prediction_error(v_hat: np.ndarray, v: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """e = α·‖v̂ − v‖₁ + (1 − α)·(1 − cos(v̂, v)), построчно."""
    v_hat, v = np.atleast_2d(v_hat), np.atleast_2d(v)
    cos, _ = _cos_rows(v_hat, v)
    return alpha * np.abs(v_hat - v).sum(axis=1) + (1.0 - alpha) * (1.0 - cos)


@dataclass
class CuriosityTerms:
    error: np.ndarray        # e_t
    variance: np.ndarray     # σ_t² по MC-сэмплам
    validity: np.ndarray     # r̂_t (логит)


def curiosity_terms(head: DynamicsHead, X: np.ndarray, Y: np.ndarray, rng: np.random.Generator,
                    mc_samples: int = 4, alpha: float = 0.5) -> CuriosityTerms:
    if not head.trained:
        raise ValueError("Dynamics: голова не обучена (trained=False)")
    X, Y = np.atleast_2d(X), np.atleast_2d(Y)
    v_hat, r_hat = head.predict(X)
    samples = np.stack([head.predict(X, rng)[0] for _ in range(max(mc_samples, 1))])
    variance = samples.var(axis=0).mean(axis=1)
    return CuriosityTerms(prediction_error(v_hat, Y, alpha), variance, r_hat)


def gated_reward(terms: CuriosityTerms, beta: float, p95: Optional[float] = None) -> np.ndarray:
    """min(e/(1 + βσ²), p95)·sigmoid(r̂); p95 по умолчанию считается по этой же пачке."""
    gated = terms.error / (1.0 + beta * terms.variance)
    cap = float(np.percentile(gated, 95)) if p95 is None else p95
    return np.minimum(gated, cap) * expit(terms.validity)


def curiosity(head: DynamicsHead, x: np.ndarray, v_next: np.ndarray, batch_p95: float,
              rng: np.random.Generator, cfg: Optional[DynamicsConfig] = None) -> float:
    cfg = cfg or DynamicsConfig()
    terms = curiosity_terms(head, x, v_next, rng, cfg.mc_samples, cfg.alpha)
    return float(gated_reward(terms, cfg.gate_beta, batch_p95)[0])


def curiosity_batch(head: DynamicsHead, X: np.ndarray, Y: np.ndarray, rng: np.random.Generator,
                    cfg: Optional[DynamicsConfig] = None) -> np.ndarray:
    cfg = cfg or DynamicsConfig()
    if len(X) == 0:
        return np.zeros(0)
    terms = curiosity_terms(head, X, Y, rng, cfg.mc_samples, cfg.alpha)
    return gated_reward(terms, cfg.gate_beta)


def gate_sweep(
    head: DynamicsHead,
    X: np.ndarray,
    Y: np.ndarray,
    seed: int = 0,
    samples: Sequence[int] = (1, 2, 4, 8),
    betas: Sequence[float] = (0.0, 2.5, 5.0, 10.0),
    alpha: float = 0.5,
) -> List[Dict[str, float]]:
    """Средняя награда любопытства по сетке (S, β)."""
    rows = []
    for s in samples:
        terms = curiosity_terms(head, X, Y, make_rng(seed, "gate", s), s, alpha)
        for b in betas:
            r = gated_reward(terms, b)
            rows.append({"mc_samples": s, "beta": b, "mean_reward": float(r.mean()),
                         "mean_variance": float(terms.variance.mean())})
    return rows
