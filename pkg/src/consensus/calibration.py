# src/consensus/calibration.py

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Sequence

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.special import expit, log_softmax, softmax
from sklearn.isotonic import IsotonicRegression
from sklearn.linear_model import LogisticRegression

from config import CALIBRATORS, ConsensusConfig
from utils.errors import ConfigError, TrainingError
from utils.logger import get_logger

logger = get_logger("pixelsoul-consensus")

MIN_CAL_EXAMPLES = 10


@dataclass
class Calibrator:
    """
    Калибровка ответной головы. По умолчанию temperature scaling,
    platt / vector / isotonic — альтернативы с тем же контрактом.
    """
    kind: str = "temperature"
    temperature: float = 1.0
    alpha: float = 1.0
    params: Dict[str, Any] = field(default_factory=dict)

    def probs(self, logits: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(logits, dtype=float))
        if self.kind == "temperature":
            return softmax(z / self.temperature, axis=1)
        if self.kind == "vector":
            w = np.asarray(self.params["w"])
            b = np.asarray(self.params["b"])
            return softmax(z * w + b, axis=1)
        if self.kind == "platt":
            a = np.asarray(self.params["a"])
            b = np.asarray(self.params["b"])
            return _renormalize(expit(z * a + b))
        if self.kind == "isotonic":
            p = softmax(z, axis=1)
            out = np.column_stack([
                np.interp(p[:, c], self.params["x"][c], self.params["y"][c])
                for c in range(p.shape[1])
            ])
            return _renormalize(out)
        raise ConfigError(f"неизвестный калибратор {self.kind!r}", field="consensus.calibrator")

    def confidence(self, logits: np.ndarray, answer: int) -> float:
        """Cal = p̃(answer)^α по откалиброванному распределению."""
        p = float(self.probs(logits)[0, answer])
        return max(p, 1e-12) ** self.alpha


def _renormalize(p: np.ndarray) -> np.ndarray:
    s = p.sum(axis=1, keepdims=True)
    uniform = np.full_like(p, 1.0 / p.shape[1])
    return np.where(s > 0, p / np.where(s > 0, s, 1.0), uniform)


def _check_cal_set(logits: np.ndarray, labels: np.ndarray) -> None:
    n_classes = len(np.unique(labels))
    if len(labels) < MIN_CAL_EXAMPLES or n_classes < 2:
        raise TrainingError(
            "Calibration: dev-cal слишком мал или из одного класса",
            {"examples": int(len(labels)), "classes": int(n_classes)},
        )
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise ValueError(f"Calibration: logits {logits.shape} не сходятся с labels {labels.shape}")


def nll(logits: np.ndarray, labels: np.ndarray, temperature: float = 1.0) -> float:
    lp = log_softmax(np.asarray(logits, dtype=float) / temperature, axis=1)
    return float(-lp[np.arange(len(labels)), labels].mean())


# ---------------------------------------------------------------------------------
# ПОДГОНКА
# ---------------------------------------------------------------------------------

def fit_temperature(logits: np.ndarray, labels: Sequence[int], cfg: Optional[ConsensusConfig] = None) -> Calibrator:
    """T = argmin NLL(softmax(z/T)) одномерным поиском по log T в [t_min, t_max]."""
    cfg = cfg or ConsensusConfig()
    z = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=int)
    _check_cal_set(z, y)
    res = minimize_scalar(
        lambda u: nll(z, y, float(np.exp(u))),
        bounds=(np.log(cfg.t_min), np.log(cfg.t_max)),
        method="bounded",
        options={"xatol": 1e-6},
    )
    T = float(np.exp(res.x))
    logger.info(f"Calibration: temperature T={T:.4f} nll={res.fun:.4f} n={len(y)}")
    return Calibrator(kind="temperature", temperature=T, alpha=cfg.cal_alpha)


def fit_vector(logits: np.ndarray, labels: Sequence[int], cfg: Optional[ConsensusConfig] = None) -> Calibrator:
    """Vector scaling: softmax(z·w + b), 2C параметров, L-BFGS по NLL."""
    cfg = cfg or ConsensusConfig()
    z = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=int)
    _check_cal_set(z, y)
    n, c = z.shape
    onehot = np.eye(c)[y]

    def fun(theta: np.ndarray):
        w, b = theta[:c], theta[c:]
        lp = log_softmax(z * w + b, axis=1)
        d = (np.exp(lp) - onehot) / n
        return float(-(lp * onehot).sum() / n), np.concatenate([(d * z).sum(axis=0), d.sum(axis=0)])

    res = minimize(fun, np.concatenate([np.ones(c), np.zeros(c)]), jac=True, method="L-BFGS-B")
    return Calibrator(kind="vector", alpha=cfg.cal_alpha,
                      params={"w": res.x[:c].tolist(), "b": res.x[c:].tolist()})


def fit_platt(logits: np.ndarray, labels: Sequence[int], cfg: Optional[ConsensusConfig] = None) -> Calibrator:
    """Platt one-vs-rest: σ(a_c·z_c + b_c) по каждому классу, потом нормировка."""
    cfg = cfg or ConsensusConfig()
    z = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=int)
    _check_cal_set(z, y)
    a, b = [], []
    for c in range(z.shape[1]):
        target = (y == c).astype(int)
        if target.min() == target.max():
            logger.warning(f"Calibration: class {c} has one outcome in dev-cal, platt falls back to identity")
            a.append(1.0)
            b.append(0.0)
            continue
        lr = LogisticRegression(C=1e4).fit(z[:, [c]], target)
        a.append(float(lr.coef_[0, 0]))
        b.append(float(lr.intercept_[0]))
    return Calibrator(kind="platt", alpha=cfg.cal_alpha, params={"a": a, "b": b})


def fit_isotonic(logits: np.ndarray, labels: Sequence[int], cfg: Optional[ConsensusConfig] = None) -> Calibrator:
    """Изотоническая регрессия p_c → 1{y=c} по каждому классу; храним узлы для np.interp."""
    cfg = cfg or ConsensusConfig()
    z = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=int)
    _check_cal_set(z, y)
    p = softmax(z, axis=1)
    xs, ys = [], []
    for c in range(z.shape[1]):
        iso = IsotonicRegression(y_min=0.0, y_max=1.0, out_of_bounds="clip").fit(p[:, c], (y == c).astype(float))
        xs.append(iso.X_thresholds_.tolist())
        ys.append(iso.y_thresholds_.tolist())
    return Calibrator(kind="isotonic", alpha=cfg.cal_alpha, params={"x": xs, "y": ys})


FITTERS = {
    "temperature": fit_temperature,
    "vector": fit_vector,
    "platt": fit_platt,
    "isotonic": fit_isotonic,
}


def fit_calibrator(logits: np.ndarray, labels: Sequence[int], cfg: ConsensusConfig) -> Calibrator:
    if cfg.calibrator not in CALIBRATORS:
        raise ConfigError(f"допустимо {CALIBRATORS}", field="consensus.calibrator")
    return FITTERS[cfg.calibrator](logits, labels, cfg)


# ---------------------------------------------------------------------------------
# ECE
# ---------------------------------------------------------------------------------

def ece_from_confidence(confidence: Sequence[float], correct: Sequence[bool], bins: int = 15) -> float:
    """Σ_b (n_b/N)·|acc_b − conf_b| по равным бинам (0,1]."""
    if bins < 1:
        raise ValueError(f"ECE: bins ≥ 1, получено {bins}")
    conf = np.asarray(confidence, dtype=float)
    hit = np.asarray(correct, dtype=float)
    if conf.size == 0:
        return 0.0
    idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
    total = 0.0
    for b in np.unique(idx):
        sel = idx == b
        total += sel.sum() / conf.size * abs(hit[sel].mean() - conf[sel].mean())
    return float(total)


def ece(probs: np.ndarray, labels: Sequence[int], bins: int = 15) -> float:
    """probs (N, C): уверенность = max p, верно = argmax совпал с меткой."""
    p = np.atleast_2d(np.asarray(probs, dtype=float))
    y = np.asarray(labels, dtype=int)
    return ece_from_confidence(p.max(axis=1), p.argmax(axis=1) == y, bins)


# ---------------------------------------------------------------------------------
# СНАПШОТ
# ---------------------------------------------------------------------------------

def calibrator_to_json(cal: Calibrator) -> str:
    return json.dumps(asdict(cal), sort_keys=True, indent=2)


def calibrator_from_json(text: str) -> Calibrator:
    return Calibrator(**json.loads(text))
