import os
import sys
import json
import hashlib
import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from dotenv import load_dotenv

# === 1. Пути проекта и .env ===
CURRENT_DIR = os.path.dirname(os.path.abspath(__file__))      # .../src
PROJECT_ROOT = os.path.dirname(CURRENT_DIR)                    # корень репозитория
if CURRENT_DIR not in sys.path:
    sys.path.insert(0, CURRENT_DIR)

ENV_PATH = os.path.join(PROJECT_ROOT, ".env")

# .env нужен только локально, в CI его нет — это нормально.
if os.path.exists(ENV_PATH):
    load_dotenv(ENV_PATH)

from utils.errors import ConfigError


# === 2. Settings — окружение процесса (только число потоков) ===
@dataclass
class Settings:
    threads: int

    def ensure_env_ready(self):
        """Прокидываем число потоков в BLAS до первого тяжёлого вызова numpy."""
        if self.threads > 0:
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ[var] = str(self.threads)

        print("🔹 SETTINGS INITIALIZED")
        print(f"   PIXELSOUL_THREADS: {self.threads or 'auto'}")
        print(f"   .env present: {os.path.exists(ENV_PATH)}")


def build_settings() -> Settings:
    raw = os.getenv("PIXELSOUL_THREADS", "0").strip() or "0"
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"ожидалось целое число, получено {raw!r}", field="PIXELSOUL_THREADS")
    return Settings(threads=max(0, threads))


settings = build_settings()


# === 3. Конфиг эксперимента: по секции на модуль ===

QUERY_KINDS = ("read_text", "attribute", "track", "temporal")


@dataclass
class WorldConfig:
    height: int = 32
    width: int = 32
    frames: int = 8
    n_objects: int = 4
    n_classes: int = 4
    moving_objects: int = 1
    velocity_cap: int = 2
    min_size: int = 3
    max_size: int = 6
    text_rate: float = 0.5
    glyph_alphabet: int = 16
    n_answers: int = 4
    n_colors: int = 4
    n_events: int = 1
    brightness_levels: int = 3
    # ручки сдвига для замороженного probe-сплита
    brightness_shift: int = 0
    velocity_shift: int = 0
    query_kinds: List[str] = field(default_factory=lambda: list(QUERY_KINDS))

    @property
    def n_codes(self) -> int:
        return 1 + self.n_classes + self.brightness_levels


@dataclass
class NoiseConfig:
    p_ocr: float = 0.05
    box_jitter: int = 0
    trk_jitter: int = 1
    temp_jitter: int = 1
    p_prop: float = 0.05
    disabled_tools: List[str] = field(default_factory=list)


@dataclass
class TeacherConfig:
    traces_per_query: int = 2
    detour_rate: float = 0.15
    accept_weights: Tuple[float, float, float] = (0.4, 0.3, 0.3)
    accept_tau0: float = 0.65


@dataclass
class SftConfig:
    epochs: int = 30
    # Adam, lr линейно затухает к нулю за все эпохи
    lr: float = 0.05
    batch_size: int = 32
    w_act: float = 2.0
    alpha_tool: float = 0.2
    lambda_box: float = 1.0
    lambda_text: float = 1.0
    lambda_mask: float = 1.0
    lambda_temp: float = 1.0
    feedback_dropout: float = 0.05
    early_action_dropout: float = 0.02
    early_action_horizon: int = 3
    label_smoothing: float = 0.05
    grad_clip: float = 1.0
    curriculum: bool = True
    medium_hard_ratio: Tuple[int, int] = (2, 1)
    advance_tolerance: float = 1.05
    dev_fraction: float = 0.1
    loss_ema: float = 0.9
    max_steps: int = 6
    temperature: float = 1.0


@dataclass
class RewardWeights:
    w1: float = 1.0
    w2: float = 0.3
    w3: float = 0.3
    w4: float = 1.0
    l0: int = 6
    alpha_len: float = 0.02
    alpha_inv: float = 0.30
    # "trajectory": z-score сумм по траектории, "step": z-score по шагам
    curiosity_zscore: str = "trajectory"
    # "cosine": смежные косинусы E_t, "l2_smooth": L2-гладкость аргументов
    coherence_prior: str = "cosine"


@dataclass
class RftConfig:
    updates: int = 200
    group_size: int = 8
    prompts_per_update: int = 4
    lr: float = 0.1
    grad_clip: float = 1.0
    kl_target: float = 0.15
    beta_init: float = 1.0
    projector_lr: float = 0.0
    variant: str = "both_penalty"


@dataclass
class DynamicsConfig:
    hidden: Tuple[int, ...] = (256, 256)
    dropout: float = 0.1
    mc_samples: int = 4
    gate_beta: float = 5.0
    alpha: float = 0.5
    loss_weights: Tuple[float, float, float] = (0.5, 0.5, 1.0)
    lr: float = 0.05
    epochs: int = 50
    batch_size: int = 64
    grad_clip: float = 1.0
    embed_hidden: int = 768
    embed_dim: int = 512
    embed_layernorm: bool = True


@dataclass
class PidConfig:
    kp: float = 0.30
    ki: float = 0.05
    kd: float = 0.10
    i_max: float = 5.0
    beta_min: float = 1e-3
    beta_max: float = 1e2
    ema_tau: float = 0.9
    warmup: int = 100
    # множитель β за шаг ограничен [1/max_ratio, max_ratio]
    max_ratio: float = 2.0
    # шаг политики масштабируется к целевому KL; 0 отключает, иначе предел растяжения
    trust_scale: float = 4.0


@dataclass
class ConsensusConfig:
    calibrator: str = "temperature"
    cal_alpha: float = 1.0
    t_min: float = 0.05
    t_max: float = 20.0
    conformal_lambda: float = 0.1
    conformal_threshold: float = 0.5
    ds_epsilon: float = 1e-2
    ds_tol: float = 1e-6
    ds_max_iter: int = 50
    ece_bins: int = 15
    majority_entropy: float = 0.2


@dataclass
class TtrlConfig:
    n_rollouts: int = 8
    kappa: float = 0.5
    lambda_pen: float = 1.0
    delta: float = 0.1
    corridor_min: float = 0.10
    corridor_target: float = 0.15
    corridor_max: float = 0.20
    ema_decay: float = 0.99
    dedup_iou: float = 0.85
    grad_clip: float = 1.0
    lr: float = 0.25
    beta_init: float = 1.0
    neighbors: int = 8
    value_decay: float = 0.9
    lambda_pix: float = 0.5
    eta: float = 0.1
    xi: float = 1.0
    # "advantage": v̄·(r − b); "value_weighted": v̄·r без базы
    objective: str = "advantage"
    variant: str = "weighted"
    adversarial_flip: float = 0.0
    ds_window: int = 32
    eval_every: int = 100
    max_steps: int = 6
    probe_brightness: int = 1
    probe_velocity: int = 1


@dataclass
class RcprConfig:
    tau: float = 0.30
    l_min: int = 3
    l0: int = 6
    alpha_len: float = 0.02
    alpha_inv: float = 0.30
    gamma: float = 0.20
    omega_edit: float = 0.5
    omega_align: float = 0.5


@dataclass
class IndexConfig:
    n_list: int = 64
    m: int = 8
    bits: int = 8
    n_probe: int = 8
    rerank: int = 64
    kmeans_iters: int = 20
    text_dim: int = 32
    pixel_dim: int = 32
    encoder_seed: int = 1234
    hamming_max: int = 8
    cosine_min: float = 0.93
    ssim_confirm: float = 0.92
    ssim_clip: float = 0.90
    ssim_template: float = 0.75
    overlap_template: float = 0.5
    clip_positive_rate: float = 0.7
    audit_sample: int = 50
    # меньше стольких ключей IVF-PQ не обучаем, ищем точно
    min_train: int = 256


@dataclass
class PipelineConfig:
    stages: List[str] = field(default_factory=lambda: ["generate", "sft", "rft", "ttrl", "metrics"])
    seed: int = 0
    out_dir: str = "runs"
    n_train: int = 256
    n_dev: int = 60
    n_probe: int = 500
    n_stream: int = 2000
    budget: Optional[int] = None
    variant: Optional[str] = None
    bootstrap_resamples: int = 1000


STAGES = ("generate", "sft", "rft", "ttrl", "audit", "metrics", "ablate")
RFT_VARIANTS = ("answer_only", "curiosity", "coherence", "both", "both_penalty")
TTRL_VARIANTS = ("weighted", "hard_majority", "no_safety")
CALIBRATORS = ("temperature", "platt", "vector", "isotonic")


@dataclass
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    rewards: RewardWeights = field(default_factory=RewardWeights)
    rft: RftConfig = field(default_factory=RftConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    pid: PidConfig = field(default_factory=PidConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    ttrl: TtrlConfig = field(default_factory=TtrlConfig)
    rcpr: RcprConfig = field(default_factory=RcprConfig)
    index: IndexConfig = field(default_factory=IndexConfig)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Хэш всего конфига, кроме места вывода: та же конфигурация в другой папке даёт тот же корпус."""
        d = self.to_dict()
        d["pipeline"].pop("out_dir", None)
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def lineage_hash(self) -> str:
        """
        Хэш того, от чего зависят корпус и SFT-чекпоинт. Ключ папки прогона:
        стадии ниже по течению (RFT, TTRL, варианты) пишут в ту же папку новыми версиями файлов.
        """
        d = self.to_dict()
        p = d["pipeline"]
        lineage = {
            "seed": p["seed"], "n_train": p["n_train"], "n_dev": p["n_dev"],
            "world": d["world"], "noise": d["noise"], "teacher": d["teacher"], "sft": d["sft"],
        }
        canon = json.dumps(lineage, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def validate(self) -> "RunConfig":
        """Перекрёстные проверки. Ошибка всегда называет точное поле."""
        w = self.world
        if w.height * w.width <= 0:
            raise ConfigError("H·W должно быть > 0", field="world.height")
        if w.frames < 1:
            raise ConfigError("нужен хотя бы один кадр", field="world.frames")
        if w.height < 8 or w.width < 8:
            raise ConfigError("сетка меньше 8×8 не поддерживается", field="world.height")
        if not 1 <= w.n_objects <= 16:
            raise ConfigError("от 1 до 16 объектов", field="world.n_objects")
        if w.moving_objects > w.n_objects:
            raise ConfigError("движущихся больше, чем объектов", field="world.moving_objects")
        if not 1 <= w.min_size <= w.max_size:
            raise ConfigError("min_size ≤ max_size", field="world.min_size")
        if w.n_answers < 2:
            raise ConfigError("нужно ≥ 2 классов ответа", field="world.n_answers")
        if w.brightness_shift < 0 or w.brightness_shift >= w.brightness_levels:
            raise ConfigError("сдвиг яркости вне палитры", field="world.brightness_shift")
        for kind in w.query_kinds:
            if kind not in QUERY_KINDS:
                raise ConfigError(f"неизвестный тип запроса {kind!r}", field="world.query_kinds")

        weights = self.teacher.accept_weights
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigError(f"веса S(τ) должны суммироваться в 1, сейчас {sum(weights)}",
                              field="teacher.accept_weights")

        r = self.rewards
        for name in ("w1", "w2", "w3", "w4", "alpha_len", "alpha_inv"):
            if getattr(r, name) < 0:
                raise ConfigError("вес не может быть отрицательным", field=f"rewards.{name}")
        if r.curiosity_zscore not in ("trajectory", "step"):
            raise ConfigError("допустимо trajectory|step", field="rewards.curiosity_zscore")
        if r.coherence_prior not in ("cosine", "l2_smooth"):
            raise ConfigError("допустимо cosine|l2_smooth", field="rewards.coherence_prior")

        p = self.pid
        if p.max_ratio <= 1.0:
            raise ConfigError("max_ratio > 1", field="pid.max_ratio")
        if p.trust_scale != 0.0 and p.trust_scale < 1.0:
            raise ConfigError("trust_scale = 0 или ≥ 1", field="pid.trust_scale")

        if self.rft.group_size < 2:
            raise ConfigError("GRPO требует K ≥ 2", field="rft.group_size")
        if self.rft.variant not in RFT_VARIANTS:
            raise ConfigError(f"допустимо {RFT_VARIANTS}", field="rft.variant")

        t = self.ttrl
        if not t.corridor_min < t.corridor_target < t.corridor_max:
            raise ConfigError("нужно corridor_min < target < max", field="ttrl.corridor_target")
        if not 0.0 < t.value_decay < 1.0:
            raise ConfigError("decay ∈ (0,1)", field="ttrl.value_decay")
        if not 0.0 < t.ema_decay < 1.0:
            raise ConfigError("ρ ∈ (0,1)", field="ttrl.ema_decay")
        if t.variant not in TTRL_VARIANTS:
            raise ConfigError(f"допустимо {TTRL_VARIANTS}", field="ttrl.variant")
        if t.objective not in ("advantage", "value_weighted"):
            raise ConfigError("допустимо advantage|value_weighted", field="ttrl.objective")
        if not 0.0 <= t.lambda_pix <= 1.0:
            raise ConfigError("λ_pix ∈ [0,1]", field="ttrl.lambda_pix")

        if self.consensus.calibrator not in CALIBRATORS:
            raise ConfigError(f"допустимо {CALIBRATORS}", field="consensus.calibrator")
        if not 0.0 < self.consensus.majority_entropy <= 1.0:
            raise ConfigError("порог энтропии голосов ∈ (0,1]", field="consensus.majority_entropy")
        if self.rcpr.gamma <= 0:
            raise ConfigError("γ > 0", field="rcpr.gamma")
        ix = self.index
        if (ix.text_dim + ix.pixel_dim) % ix.m != 0:
            raise ConfigError("размерность ключа должна делиться на m", field="index.m")
        if ix.n_probe > ix.n_list:
            raise ConfigError("n_probe ≤ n_list", field="index.n_probe")
        if ix.min_train < 16:
            raise ConfigError("IVF-PQ нужно хотя бы 16 ключей для обучения", field="index.min_train")
        if self.pipeline.bootstrap_resamples < 100:
            raise ConfigError("бутстрапу нужно B ≥ 100", field="pipeline.bootstrap_resamples")
        for stage in self.pipeline.stages:
            if stage not in STAGES:
                raise ConfigError(f"неизвестная стадия {stage!r}", field="pipeline.stages")
        return self


# === 4. Сборка дерева конфигов из JSON ===

def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = get_origin(hint)
    args = get_args(hint)

    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError("ожидалась секция (объект)", field=path)
        return _build(hint, value, path)

    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)

    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError("ожидался список", field=path)
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]

    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError("ожидался список", field=path)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"ожидалось {len(args)} элемента(ов)", field=path)
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))

    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"ожидался bool, получено {value!r}", field=path)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"ожидалось int, получено {value!r}", field=path)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"ожидалось число, получено {value!r}", field=path)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"ожидалась строка, получено {value!r}", field=path)
        return value
    return value


def _build(cls, data: Dict[str, Any], path: str):
    hints = get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            where = f"{path}.{key}" if path else key
            raise ConfigError("неизвестный ключ", field=where)
    kwargs = {}
    for name in known:
        if name in data:
            where = f"{path}.{name}" if path else name
            kwargs[name] = _coerce(data[name], hints[name], where)
    return cls(**kwargs)


def run_config_from_dict(data: Dict[str, Any]) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_run_config(path: str) -> RunConfig:
    """Читает единый JSON-конфиг. Неизвестные ключи — жёсткая ошибка."""
    if not os.path.exists(path):
        raise ConfigError(f"файл конфига не найден: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"битый JSON (строка {e.lineno}, колонка {e.colno}): {e.msg}")
    if not isinstance(data, dict):
        raise ConfigError("корень конфига должен быть объектом")
    return run_config_from_dict(data)


def apply_overrides(cfg: RunConfig, seed: Optional[int] = None, out_dir: Optional[str] = None,
                    variant: Optional[str] = None, budget: Optional[int] = None) -> RunConfig:
    """
    Флаги CLI поверх файла. --variant сам находит секцию:
    вариант награды уходит в rft, вариант голосования — в ttrl.
    """
    data = cfg.to_dict()
    p = data["pipeline"]
    if seed is not None:
        p["seed"] = seed
    if out_dir is not None:
        p["out_dir"] = out_dir
    if budget is not None:
        if budget < 0:
            raise ConfigError("бюджет не может быть отрицательным", field="pipeline.budget")
        p["budget"] = budget
    if variant is not None:
        if variant in RFT_VARIANTS:
            data["rft"]["variant"] = variant
        elif variant in TTRL_VARIANTS:
            data["ttrl"]["variant"] = variant
        else:
            raise ConfigError(f"допустимо {RFT_VARIANTS + TTRL_VARIANTS}", field="pipeline.variant")
        p["variant"] = variant
    return run_config_from_dict(data)
