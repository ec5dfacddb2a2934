# src/policy/sft.py

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_softmax, softmax

from config import SftConfig, WorldConfig
from policy.features import ActionSpace, FeatureLayout, featurize_state
from percept.mlp import Adam
from policy.model import PolicyGrad, PolicyParams, init_policy
from toyworld.scene import Clip, N_REGIONS, TOOL_OPS, glyph_index, region_rect
from toyworld.teacher import TeacherTrace
from toyworld.tools import EpisodeState, advance
from toyworld.verify import placed_mask
from utils.errors import TrainingError
from utils.logger import get_logger
from utils.seeding import make_rng

logger = get_logger("pixelsoul-sft")


# ---------------------------------------------------------------------------------
# ПОЗИЦИИ ОБУЧЕНИЯ
# ---------------------------------------------------------------------------------

@dataclass
class AuxTarget:
    """Цели вспомогательных голов для одного decisive шага (None — у инструмента нет такой цели)."""
    box: Optional[np.ndarray] = None       # (4,) нормированные x, y, w, h
    glyph: Optional[int] = None
    mask: Optional[np.ndarray] = None      # (16,) занятость 4×4 бинов
    temporal: Optional[np.ndarray] = None  # (F,) принадлежность кадров отрезку


@dataclass
class TraceExample:
    trace_index: int
    features: np.ndarray         # (T+1, D): шаги + позиция ANSWER
    actions: np.ndarray          # (T+1,)
    is_tool: np.ndarray          # (T+1,) bool
    answer_features: np.ndarray  # (D_ans,)
    answer: int
    aux_features: np.ndarray     # (n_dec, D)
    aux: List[AuxTarget]


def _aux_target(obs, clip: Clip) -> AuxTarget:
    H, W, F = clip.height, clip.width, clip.n_frames
    p = obs.payload
    target = AuxTarget()

    def norm_box(b):
        return np.array([b[0] / W, b[1] / H, b[2] / W, b[3] / H])

    if obs.op == "SEG":
        target.box = norm_box(p["box"])
        full = placed_mask(np.asarray(p["mask"], dtype=bool), p["box"], H, W)
        target.mask = np.array([
            float((full & region_rect(r, H, W).cell_mask(H, W)).any()) for r in range(N_REGIONS)
        ])
    elif obs.op == "ZOOM":
        target.box = norm_box(p["rect"])
    elif obs.op == "TRK":
        target.box = norm_box(p["boxes"][-1])
    elif obs.op == "OCR" and p["text"]:
        target.glyph = glyph_index(p["text"][0])
    elif obs.op == "TEMP":
        s, e = p["interval"]
        member = np.zeros(F)
        member[s:e + 1] = 1.0
        target.temporal = member
    return target


def build_example(trace: TeacherTrace, clip: Clip, layout: FeatureLayout, space: ActionSpace,
                  max_steps: int, index: int = 0) -> TraceExample:
    """Прокручиваем траекторию учителя по записанным наблюдениям (инструменты не перезапускаем)."""
    state = EpisodeState.start(clip)
    feats, actions, is_tool, aux_feats, aux = [], [], [], [], []
    for t, step in enumerate(trace.steps):
        x = featurize_state(state, trace.query, t, max_steps, layout)
        feats.append(x)
        actions.append(space.encode(step.call.op, step.call.arg))
        is_tool.append(True)
        if step.decisive and step.obs.success:
            aux_feats.append(x)
            aux.append(_aux_target(step.obs, clip))
        state, _ = advance(state, step.call, step.obs)
    x = featurize_state(state, trace.query, len(trace.steps), max_steps, layout)
    feats.append(x)
    actions.append(space.answer_index)
    is_tool.append(False)
    return TraceExample(
        trace_index=index,
        features=np.stack(feats),
        actions=np.asarray(actions),
        is_tool=np.asarray(is_tool),
        answer_features=x[layout.answer_index()],
        answer=int(trace.answer),
        aux_features=np.stack(aux_feats) if aux_feats else np.zeros((0, layout.dim)),
        aux=aux,
    )


# ---------------------------------------------------------------------------------
# ВСПОМОГАТЕЛЬНЫЕ ГОЛОВЫ
# ---------------------------------------------------------------------------------

@dataclass
class AuxHeads:
    w_box: np.ndarray
    w_glyph: np.ndarray
    w_mask: np.ndarray
    w_temp: np.ndarray

    @staticmethod
    def init(dim: int, glyphs: int, n_frames: int, rng: np.random.Generator, scale: float = 0.01) -> "AuxHeads":
        return AuxHeads(
            w_box=rng.normal(0, scale, (dim, 4)),
            w_glyph=rng.normal(0, scale, (dim, glyphs)),
            w_mask=rng.normal(0, scale, (dim, N_REGIONS)),
            w_temp=rng.normal(0, scale, (dim, n_frames)),
        )

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"w_box": self.w_box, "w_glyph": self.w_glyph, "w_mask": self.w_mask, "w_temp": self.w_temp}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> "AuxHeads":
        return AuxHeads(**{k: v - lr * grads[k] for k, v in self.arrays().items()})


def _smooth_l1(d: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.abs(d)
    loss = np.where(a < 1.0, 0.5 * d * d, a - 0.5)
    grad = np.where(a < 1.0, d, np.sign(d))
    return loss, grad


def aux_loss(heads: AuxHeads, x: np.ndarray, targets: Sequence[AuxTarget], cfg: SftConfig
             ) -> Tuple[float, Dict[str, np.ndarray]]:
    """L_tool: Smooth-L1 для рамок, CE для глифа, Dice для маски, BCE для отрезка. Усреднение по шагам с целью."""
    grads = {k: np.zeros_like(v) for k, v in heads.arrays().items()}
    total = 0.0

    rows = [i for i, t in enumerate(targets) if t.box is not None]
    if rows:
        X = x[rows]
        Y = np.stack([targets[i].box for i in rows])
        loss, g = _smooth_l1(X @ heads.w_box - Y)
        n = len(rows)
        total += cfg.lambda_box * float(loss.mean(axis=1).sum() / n)
        grads["w_box"] += cfg.lambda_box * X.T @ (g / (4 * n))

    rows = [i for i, t in enumerate(targets) if t.glyph is not None]
    if rows:
        X = x[rows]
        logits = X @ heads.w_glyph
        lp = log_softmax(logits, axis=1)
        idx = np.array([targets[i].glyph for i in rows])
        n = len(rows)
        total += cfg.lambda_text * float(-lp[np.arange(n), idx].sum() / n)
        d = softmax(logits, axis=1)
        d[np.arange(n), idx] -= 1.0
        grads["w_glyph"] += cfg.lambda_text * X.T @ d / n

    rows = [i for i, t in enumerate(targets) if t.mask is not None]
    if rows:
        X = x[rows]
        Y = np.stack([targets[i].mask for i in rows])
        P = expit(X @ heads.w_mask)
        inter = (P * Y).sum(axis=1)
        denom = P.sum(axis=1) + Y.sum(axis=1) + 1.0
        dice = (2.0 * inter + 1.0) / denom
        n = len(rows)
        total += cfg.lambda_mask * float((1.0 - dice).sum() / n)
        d_dice_dp = (2.0 * Y * denom[:, None] - (2.0 * inter + 1.0)[:, None]) / (denom[:, None] ** 2)
        d_z = -d_dice_dp * P * (1.0 - P) / n
        grads["w_mask"] += cfg.lambda_mask * X.T @ d_z

    rows = [i for i, t in enumerate(targets) if t.temporal is not None]
    if rows:
        X = x[rows]
        Y = np.stack([targets[i].temporal for i in rows])
        z = X @ heads.w_temp
        loss = np.logaddexp(0.0, z) - Y * z
        n, F = Y.shape
        total += cfg.lambda_temp * float(loss.mean(axis=1).sum() / n)
        grads["w_temp"] += cfg.lambda_temp * X.T @ ((expit(z) - Y) / (F * n))

    return total, grads


# ---------------------------------------------------------------------------------
# ВЗВЕШЕННАЯ ИМИТАЦИЯ
# ---------------------------------------------------------------------------------

@dataclass
class SftBatch:
    x: np.ndarray            # (n, D) позиции действий
    actions: np.ndarray
    weights: np.ndarray      # w_act на инструментах, 1 на ANSWER; 0 = выброшено dropout'ом
    x_ans: np.ndarray        # (m, D_ans)
    answers: np.ndarray
    x_aux: np.ndarray
    aux: List[AuxTarget]


def make_batch(examples: Sequence[TraceExample], cfg: SftConfig, layout: FeatureLayout,
               rng: Optional[np.random.Generator] = None) -> SftBatch:
    """Собирает пачку; rng включает feedback dropout и early-action dropout."""
    xs, acts, ws, xa, ans, xaux, aux = [], [], [], [], [], [], []
    evidence = layout.evidence_index()
    for ex in examples:
        x = ex.features.copy()
        w = np.where(ex.is_tool, cfg.w_act, 1.0)
        if rng is not None:
            if cfg.feedback_dropout > 0:
                hide = rng.random(len(x)) < cfg.feedback_dropout
                for t in np.flatnonzero(hide):
                    x[t, evidence] = 0.0
            if cfg.early_action_dropout > 0:
                t_idx = np.arange(len(x))
                drop = (t_idx < cfg.early_action_horizon) & (rng.random(len(x)) < cfg.early_action_dropout)
                w = np.where(drop, 0.0, w)
        xs.append(x)
        acts.append(ex.actions)
        ws.append(w)
        xa.append(ex.answer_features)
        ans.append(ex.answer)
        xaux.append(ex.aux_features)
        aux.extend(ex.aux)
    return SftBatch(
        x=np.concatenate(xs),
        actions=np.concatenate(acts),
        weights=np.concatenate(ws),
        x_ans=np.stack(xa),
        answers=np.asarray(ans),
        x_aux=np.concatenate(xaux) if xaux else np.zeros((0, layout.dim)),
        aux=aux,
    )


def _smoothed_ce(logits: np.ndarray, targets: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """CE со сглаживанием меток; возвращает (потери по строкам, dL/dlogits по строкам)."""
    n, k = logits.shape
    y = np.full((n, k), eps / k)
    y[np.arange(n), targets] += 1.0 - eps
    lp = log_softmax(logits, axis=1)
    return -(y * lp).sum(axis=1), np.exp(lp) - y


def sft_loss(params: PolicyParams, heads: AuxHeads, batch: SftBatch, cfg: SftConfig
             ) -> Tuple[float, PolicyGrad, Dict[str, np.ndarray]]:
    """Взвешенная CE по позициям (нормировка на число позиций) + α_tool·L_tool."""
    T = params.temperature
    active = batch.weights > 0
    n_pos = int(active.sum()) + len(batch.answers)
    n_pos = max(n_pos, 1)

    ce, d = _smoothed_ce(batch.x @ params.w_act / T, batch.actions, cfg.label_smoothing)
    loss = float((batch.weights * ce).sum() / n_pos)
    g_act = batch.x.T @ (d * batch.weights[:, None]) / (T * n_pos)

    ce_a, d_a = _smoothed_ce(batch.x_ans @ params.w_ans / T, batch.answers, cfg.label_smoothing)
    loss += float(ce_a.sum() / n_pos)
    g_ans = batch.x_ans.T @ d_a / (T * n_pos)

    tool_loss, head_grads = aux_loss(heads, batch.x_aux, batch.aux, cfg)
    loss += cfg.alpha_tool * tool_loss
    head_grads = {k: cfg.alpha_tool * v for k, v in head_grads.items()}
    return loss, PolicyGrad(g_act, g_ans), head_grads


# ---------------------------------------------------------------------------------
# НОРМАЛИЗАТОРЫ ТОКЕНОВ
# ---------------------------------------------------------------------------------

@dataclass
class TokenNormalizer:
    """Бегущие среднее/дисперсия log-prob и энтропий, экспортируются из SFT."""
    logp_mean: float = 0.0
    logp_var: float = 1.0
    entropy_mean: float = 0.0
    entropy_var: float = 1.0
    count: int = 0

    def normalize_logp(self, v: float) -> float:
        return (v - self.logp_mean) / np.sqrt(max(self.logp_var, 1e-12))

    def normalize_entropy(self, v: float) -> float:
        return (v - self.entropy_mean) / np.sqrt(max(self.entropy_var, 1e-12))


def fit_token_normalizer(params: PolicyParams, examples: Sequence[TraceExample]) -> TokenNormalizer:
    if not examples:
        return TokenNormalizer()
    X = np.concatenate([ex.features for ex in examples])
    A = np.concatenate([ex.actions for ex in examples])
    lp = log_softmax(X @ params.w_act / params.temperature, axis=1)
    logp = lp[np.arange(len(A)), A]
    ent = -(np.exp(lp) * lp).sum(axis=1)
    return TokenNormalizer(float(logp.mean()), float(logp.var()), float(ent.mean()), float(ent.var()), int(len(A)))


# ---------------------------------------------------------------------------------
# ОБУЧЕНИЕ
# ---------------------------------------------------------------------------------

@dataclass
class SftResult:
    params: PolicyParams
    heads: AuxHeads
    normalizer: TokenNormalizer
    tool_scalers: Dict[str, float]
    history: List[Dict[str, float]] = field(default_factory=list)
    rolled_back: bool = False


def _per_trace_loss(params, heads, examples, cfg, layout) -> np.ndarray:
    return np.array([sft_loss(params, heads, make_batch([ex], cfg, layout), cfg)[0] for ex in examples])


def _run_epoch(params, heads, order, examples, cfg, layout, rng, epoch, opt: Adam):
    """Один проход по order; шаги Adam общие для весов политики и вспомогательных голов."""
    losses = []
    for start in range(0, len(order), cfg.batch_size):
        chunk = [examples[i] for i in order[start:start + cfg.batch_size]]
        batch = make_batch(chunk, cfg, layout, rng)
        loss, g, hg = sft_loss(params, heads, batch, cfg)
        grad_norm = float(np.sqrt(g.norm ** 2 + sum(np.sum(v ** 2) for v in hg.values())))
        if not np.isfinite(loss) or not np.isfinite(grad_norm):
            raise TrainingError("SFT: loss разошёлся",
                                {"epoch": epoch, "batch_start": start, "loss": loss, "grad_norm": grad_norm})
        scale = 1.0
        if cfg.grad_clip > 0 and grad_norm > cfg.grad_clip:
            scale = cfg.grad_clip / grad_norm
        names = sorted(hg)
        steps = opt.update([g.w_act * scale, g.w_ans * scale] + [hg[k] * scale for k in names])
        params = params.step(PolicyGrad(steps[0], steps[1]), 1.0)
        heads = heads.step(dict(zip(names, steps[2:])), 1.0)
        losses.append(loss)
    return params, heads, float(np.mean(losses)) if losses else 0.0


def sft_train(
    traces: Sequence[TeacherTrace],
    clips: Dict[str, Clip],
    cfg: SftConfig,
    world: WorldConfig,
    seed: int = 0,
) -> SftResult:
    """
    Фаза 1: взвешенная имитация принятых траекторий учителя.
    Прогрев на всём пуле, затем (если включён curriculum) выборка medium:hard = 2:1
    по терцилям прогревочного loss; продвигаемся, пока EMA dev-loss
    не вырос больше чем в advance_tolerance раз, иначе откат и стоп.
    """
    pool = [t for t in traces if t.accepted]
    if not pool:
        raise TrainingError("SFT: пул принятых траекторий пуст", {"offered": len(traces)})

    layout = FeatureLayout.for_world(world)
    space = ActionSpace(world.frames)
    examples = [build_example(t, clips[t.clip_id], layout, space, cfg.max_steps, i) for i, t in enumerate(pool)]

    rng = make_rng(seed, "sft")
    n_dev = int(len(examples) * cfg.dev_fraction)
    order = rng.permutation(len(examples))
    dev = [examples[i] for i in order[:n_dev]] if n_dev > 0 else examples
    train = [examples[i] for i in order[n_dev:]] if n_dev > 0 else examples

    params = init_policy(layout, space, world.n_answers, seed=seed, temperature=cfg.temperature)
    heads = AuxHeads.init(layout.dim, world.glyph_alphabet, world.frames, make_rng(seed, "sft-heads"))
    history: List[Dict[str, float]] = []
    opt = Adam(cfg.lr, cfg.epochs * int(np.ceil(len(train) / cfg.batch_size)))

    # прогрев
    params, heads, train_loss = _run_epoch(params, heads, rng.permutation(len(train)), train, cfg, layout, rng, 0, opt)
    dev_loss = float(_per_trace_loss(params, heads, dev, cfg, layout).mean())
    ema = dev_loss
    history.append({"epoch": 0, "train_loss": train_loss, "dev_loss": dev_loss, "dev_ema": ema})

    sampling_p = None
    if cfg.curriculum and len(train) >= 3:
        hardness = _per_trace_loss(params, heads, train, cfg, layout)
        lo, hi = np.quantile(hardness, [1.0 / 3.0, 2.0 / 3.0])
        medium = (hardness > lo) & (hardness <= hi)
        hard = hardness > hi
        m_w, h_w = cfg.medium_hard_ratio
        if medium.any() and hard.any():
            w = np.where(medium, m_w / medium.sum(), 0.0) + np.where(hard, h_w / hard.sum(), 0.0)
            sampling_p = w / w.sum()
        logger.info(f"SFT curriculum: medium={int(medium.sum())} hard={int(hard.sum())}")

    rolled_back = False
    for epoch in range(1, cfg.epochs):
        if sampling_p is not None:
            epoch_order = rng.choice(len(train), size=len(train), p=sampling_p)
        else:
            epoch_order = rng.permutation(len(train))
        new_params, new_heads, train_loss = _run_epoch(params, heads, epoch_order, train, cfg, layout, rng, epoch, opt)
        dev_loss = float(_per_trace_loss(new_params, new_heads, dev, cfg, layout).mean())
        new_ema = cfg.loss_ema * ema + (1.0 - cfg.loss_ema) * dev_loss
        if new_ema > cfg.advance_tolerance * ema:
            logger.warning(f"SFT: dev EMA {new_ema:.4f} > {cfg.advance_tolerance}×{ema:.4f}, rollback at epoch {epoch}")
            rolled_back = True
            break
        params, heads, ema = new_params, new_heads, new_ema
        history.append({"epoch": epoch, "train_loss": train_loss, "dev_loss": dev_loss, "dev_ema": ema})

    normalizer = fit_token_normalizer(params, train)
    return SftResult(
        params=params,
        heads=heads,
        normalizer=normalizer,
        tool_scalers={op: 1.0 for op in TOOL_OPS},
        history=history,
        rolled_back=rolled_back,
    )
