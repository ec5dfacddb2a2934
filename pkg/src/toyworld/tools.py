# src/toyworld/tools.py

from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from config import NoiseConfig
from toyworld.scene import (
    Clip, Footprint, Rect, ViewState, N_REGIONS, REGION_OPS, TOOL_OPS,
    glyph, glyph_index, region_rect, seg_target, target_event, zoom_rect,
)
from utils.errors import ProtocolError


@dataclass(frozen=True)
class ToolCall:
    op: str
    arg: int
    step: int = 0

    def token(self) -> str:
        return f"{self.op}({self.arg})"


@dataclass
class Observation:
    op: str
    payload: Dict[str, Any]
    success: bool
    footprint: Footprint
    confidence: float = 0.0
    valid_call: bool = True

    def signature(self) -> Tuple:
        """Канонический вид payload для сравнения (numpy → списки)."""
        return tuple(sorted((k, _freeze(v)) for k, v in self.payload.items()))


def _freeze(v: Any) -> Any:
    if isinstance(v, np.ndarray):
        return tuple(map(tuple, v.astype(int).tolist())) if v.ndim == 2 else tuple(v.tolist())
    if isinstance(v, list):
        return tuple(_freeze(x) for x in v)
    if isinstance(v, dict):
        return tuple(sorted((k, _freeze(x)) for k, x in v.items()))
    return v


# ---------------------------------------------------------------------------------
# СОСТОЯНИЕ ЭПИЗОДА: вид + буфер улик
# ---------------------------------------------------------------------------------

@dataclass
class EpisodeState:
    clip: Clip
    view: ViewState
    evidence: Dict[Tuple[str, int], Observation] = field(default_factory=dict)
    calls: List[ToolCall] = field(default_factory=list)
    last_op: Optional[str] = None

    @staticmethod
    def start(clip: Clip) -> "EpisodeState":
        return EpisodeState(clip=clip, view=ViewState.full(clip))

    def latest(self, op: str) -> Optional[Observation]:
        found = None
        for (o, _), obs in self.evidence.items():
            if o == op:
                found = obs
        return found


def arg_range(op: str, n_frames: int) -> int:
    if op in REGION_OPS:
        return N_REGIONS
    if op == "TEMP":
        return n_frames
    return 0


def _fail_footprint(clip: Clip, view: ViewState, call: ToolCall) -> Footprint:
    if call.op == "TEMP":
        start = min(max(call.arg, 0), clip.n_frames - 1)
        return Footprint(clip.full_rect(), start, clip.n_frames - 1)
    if 0 <= call.arg < N_REGIONS:
        rect = region_rect(call.arg, clip.height, clip.width)
    else:
        rect = view.rect
    return Footprint(rect, view.f0, view.f1)


def failed_observation(clip: Clip, view: ViewState, call: ToolCall, valid_call: bool = True) -> Observation:
    return Observation(
        op=call.op,
        payload={},
        success=False,
        footprint=_fail_footprint(clip, view, call),
        confidence=0.0,
        valid_call=valid_call,
    )


def is_valid_call(state: EpisodeState, call: ToolCall) -> bool:
    """Допустим ли вызов в текущем виде. Невалидные вызовы исполняются как проваленные."""
    clip, view = state.clip, state.view
    if call.op not in TOOL_OPS:
        return False
    if not 0 <= call.arg < arg_range(call.op, clip.n_frames):
        return False
    if call.op == "TEMP":
        return True
    in_view = region_rect(call.arg, clip.height, clip.width).intersect(view.rect) is not None
    if not in_view:
        return False
    if call.op == "OCR":
        return view.is_zoomed(clip)
    if call.op in ("TRK", "PROP"):
        prior = state.evidence.get(("SEG", call.arg))
        return prior is not None and prior.success
    return True


def _clamp_box(x: int, y: int, w: int, h: int, clip: Clip) -> List[int]:
    x = int(np.clip(x, 0, clip.width - w))
    y = int(np.clip(y, 0, clip.height - h))
    return [x, y, w, h]


def _jitter(rng: np.random.Generator, amount: int) -> int:
    if amount <= 0:
        return 0
    return int(rng.integers(-amount, amount + 1))


def execute_tool(
    clip: Clip,
    view: ViewState,
    call: ToolCall,
    noise: NoiseConfig,
    rng: np.random.Generator,
    evidence: Optional[Dict[Tuple[str, int], Observation]] = None,
) -> Observation:
    """
    Исполняет один инструмент над клипом в текущем виде.
    Ничего не мутирует: новый вид/улики строит advance().
    """
    if call.op == "ANSWER":
        raise ProtocolError("execute_tool: ANSWER завершает траекторию в policy, а не здесь")
    if call.op not in TOOL_OPS:
        raise ProtocolError(f"execute_tool: неизвестная операция {call.op!r}")
    if call.op in noise.disabled_tools:
        return failed_observation(clip, view, call)

    H, W = clip.height, clip.width
    f0 = view.f0

    if call.op == "TEMP":
        idx = target_event(clip, window_start=call.arg)
        if idx is None:
            return failed_observation(clip, view, call)
        label, s, e = clip.events[idx]
        js = int(np.clip(s + _jitter(rng, noise.temp_jitter), 0, clip.n_frames - 1))
        je = int(np.clip(e + _jitter(rng, noise.temp_jitter), 0, clip.n_frames - 1))
        if je < js:
            js, je = je, js
        return Observation(
            op="TEMP",
            payload={"event": idx, "label": label, "interval": [js, je]},
            success=True,
            footprint=Footprint(clip.full_rect(), js, je),
            confidence=1.0,
        )

    if call.op == "ZOOM":
        obj = seg_target(clip, call.arg, view)
        if obj is None:
            return failed_observation(clip, view, call)
        rect = zoom_rect(call.arg, H, W)
        return Observation(
            op="ZOOM",
            payload={"object": obj.id, "rect": rect.as_list(), "frame": f0},
            success=True,
            footprint=Footprint(rect, view.f0, view.f1),
            confidence=1.0,
        )

    if call.op in ("SEG", "OCR"):
        obj = seg_target(clip, call.arg, view)
        if obj is None:
            return failed_observation(clip, view, call)
        box = obj.box_at(f0)
        if call.op == "OCR":
            if not obj.text:
                return failed_observation(clip, view, call)
            chars = []
            for ch in obj.text:
                if noise.p_ocr > 0 and rng.random() < noise.p_ocr:
                    alt = int(rng.integers(0, clip.world.glyph_alphabet - 1))
                    if alt >= glyph_index(ch):
                        alt += 1
                    chars.append(glyph(alt))
                else:
                    chars.append(ch)
            return Observation(
                op="OCR",
                payload={"object": obj.id, "text": "".join(chars), "frame": f0},
                success=True,
                footprint=Footprint(box, f0, f0),
                confidence=float((1.0 - noise.p_ocr) ** len(obj.text)),
            )
        dx, dy = _jitter(rng, noise.box_jitter), _jitter(rng, noise.box_jitter)
        noisy = _clamp_box(box.x + dx, box.y + dy, box.w, box.h, clip)
        return Observation(
            op="SEG",
            payload={"object": obj.id, "cls": obj.cls, "box": noisy,
                     "mask": obj.mask.copy(), "frame": f0},
            success=True,
            footprint=Footprint(Rect(*noisy), f0, f0),
            confidence=1.0,
        )

    # TRK / PROP опираются на предыдущий SEG по этому региону
    prior = (evidence or {}).get(("SEG", call.arg))
    if prior is None or not prior.success:
        return failed_observation(clip, view, call)
    obj = clip.object_by_id(prior.payload["object"])

    if call.op == "TRK":
        boxes = []
        for f in range(view.f0, view.f1 + 1):
            b = obj.box_at(f)
            jx, jy = _jitter(rng, noise.trk_jitter), _jitter(rng, noise.trk_jitter)
            boxes.append(_clamp_box(b.x + jx, b.y + jy, b.w, b.h, clip))
        span = Rect(*boxes[0])
        for b in boxes[1:]:
            span = span.union_bounds(Rect(*b))
        return Observation(
            op="TRK",
            payload={"object": obj.id, "boxes": boxes, "f0": view.f0},
            success=True,
            footprint=Footprint(span, view.f0, view.f1),
            confidence=1.0,
        )

    attrs = dict(obj.attributes)
    for key in sorted(attrs):
        if noise.p_prop > 0 and rng.random() < noise.p_prop:
            if key == "color":
                alt = int(rng.integers(0, clip.world.n_colors - 1))
                attrs[key] = alt + 1 if alt >= attrs[key] else alt
            else:
                attrs[key] = 1 - attrs[key]
    box = obj.box_at(f0)
    return Observation(
        op="PROP",
        payload={"object": obj.id, "attributes": attrs, "frame": f0},
        success=True,
        footprint=Footprint(box, f0, f0),
        confidence=1.0,
    )


def advance(state: EpisodeState, call: ToolCall, obs: Observation) -> Tuple[EpisodeState, bool]:
    """
    Применяет наблюдение к состоянию. Возвращает (новое состояние, decisive).
    Decisive = успешный вызов, который поменял вид или буфер улик.
    """
    view = state.view
    if obs.success and obs.op == "ZOOM":
        view = replace(view, rect=Rect(*obs.payload["rect"]))
    elif obs.success and obs.op == "TEMP":
        s, e = obs.payload["interval"]
        view = replace(view, f0=s, f1=e)

    evidence = dict(state.evidence)
    changed_evidence = False
    if obs.success:
        key = (call.op, call.arg)
        before = evidence.get(key)
        if before is None or before.signature() != obs.signature():
            changed_evidence = True
        # переустанавливаем ключ, чтобы "последнее" наблюдение было в конце
        evidence.pop(key, None)
        evidence[key] = obs

    new_state = EpisodeState(
        clip=state.clip,
        view=view,
        evidence=evidence,
        calls=state.calls + [call],
        last_op=call.op,
    )
    decisive = bool(obs.success and (view != state.view or changed_evidence))
    return new_state, decisive


def run_call(
    state: EpisodeState,
    call: ToolCall,
    noise: NoiseConfig,
    rng: np.random.Generator,
) -> Tuple[EpisodeState, Observation, bool]:
    """Проверка валидности + исполнение + применение. Единая точка для учителя и политики."""
    if is_valid_call(state, call):
        obs = execute_tool(state.clip, state.view, call, noise, rng, evidence=state.evidence)
    else:
        obs = failed_observation(state.clip, state.view, call, valid_call=False)
    new_state, decisive = advance(state, call, obs)
    return new_state, obs, decisive


# ---------------------------------------------------------------------------------
# ОТВЕТ ИЗ УЛИК
# ---------------------------------------------------------------------------------

def quadrant_from_box(box: List[int], height: int, width: int) -> int:
    x, y, w, h = box
    cx, cy = x + w // 2, y + h // 2
    return int(cy * 2 // height) * 2 + int(cx * 2 // width)


def answer_from_evidence(state: EpisodeState, kind: str) -> Optional[int]:
    """Ответ, который следует из собранных улик; None если улик не хватает."""
    clip = state.clip
    C = clip.world.n_answers
    if kind == "read_text":
        obs = state.latest("OCR")
        return glyph_index(obs.payload["text"][0]) % C if obs else None
    if kind == "attribute":
        obs = state.latest("PROP")
        return obs.payload["attributes"]["color"] % C if obs else None
    if kind == "track":
        obs = state.latest("TRK")
        if obs is None:
            return None
        return quadrant_from_box(obs.payload["boxes"][-1], clip.height, clip.width) % C
    if kind == "temporal":
        obs = state.latest("TEMP")
        if obs is None:
            return None
        start = obs.payload["interval"][0]
        return min(C - 1, start * C // clip.n_frames)
    return None
