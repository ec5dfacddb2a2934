# src/toyworld/teacher.py

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import NoiseConfig, TeacherConfig
from toyworld.scene import Clip, Query, seg_target, validate_query
from toyworld.tools import EpisodeState, Observation, ToolCall, answer_from_evidence, run_call
from toyworld.verify import accept_trace, verify_step
from utils.errors import GenerationError
from utils.logger import get_logger
from utils.seeding import make_rng

logger = get_logger("pixelsoul-teacher")


@dataclass
class TraceStep:
    call: ToolCall
    obs: Observation
    decisive: bool
    verified: bool
    fidelity: float


@dataclass
class TeacherTrace:
    query: Query
    clip_id: str
    steps: List[TraceStep]
    answer: int
    components: Tuple[float, float, float]
    shortest_len: int
    seed: int
    accepted: bool = False

    @property
    def length(self) -> int:
        # ANSWER тоже действие
        return len(self.steps) + 1

    @property
    def all_ops_pass(self) -> bool:
        return all(s.verified for s in self.steps)

    @property
    def decisive_flags(self) -> List[bool]:
        return [s.decisive for s in self.steps] + [True]


def shortest_plan(query: Query) -> List[ToolCall]:
    """Кратчайший план по разметке (без ANSWER)."""
    r = query.target_region
    if query.kind == "read_text":
        ops = [("ZOOM", r), ("OCR", r)]
    elif query.kind == "attribute":
        ops = [("SEG", r), ("PROP", r)]
    elif query.kind == "track":
        ops = [("SEG", r), ("TRK", r)]
    elif query.kind == "temporal":
        ops = [("TEMP", 0)]
    else:
        raise GenerationError(f"Teacher: нет плана для {query.kind!r}")
    return [ToolCall(op, arg) for op, arg in ops]


def _detour(state: EpisodeState, query: Query, rng: np.random.Generator) -> Optional[ToolCall]:
    """Лишний шаг: повтор предыдущего вызова или SEG-подглядывание в другой занятый регион."""
    clip = state.clip
    options = []
    if state.calls:
        options.append("repeat")
    if not state.view.is_zoomed(clip):
        options.append("peek")
    if not options:
        return None
    choice = options[int(rng.integers(0, len(options)))]
    if choice == "repeat":
        last = state.calls[-1]
        return ToolCall(last.op, last.arg)
    populated = [
        r for r in range(16)
        if r != query.target_region and seg_target(clip, r, state.view) is not None
    ]
    if not populated:
        if state.calls:
            last = state.calls[-1]
            return ToolCall(last.op, last.arg)
        return None
    return ToolCall("SEG", populated[int(rng.integers(0, len(populated)))])


def score_components(steps: Sequence[TraceStep], answer: Optional[int], truth: int,
                     shortest_len: int) -> Tuple[float, float, float]:
    """S_logic = верность ответа, S_struct = кратчайшая/фактическая длина, S_visual = средняя точность шагов."""
    length = len(steps) + 1
    s_logic = 1.0 if answer == truth else 0.0
    s_struct = min(1.0, shortest_len / length)
    s_visual = float(np.mean([s.fidelity for s in steps])) if steps else 1.0
    return s_logic, s_struct, s_visual


def run_teacher_once(clip: Clip, query: Query, noise: NoiseConfig, detour_rate: float,
                     seed: int) -> TeacherTrace:
    rng = make_rng(seed, "teacher", query.query_id)
    plan = shortest_plan(query)
    state = EpisodeState.start(clip)
    steps: List[TraceStep] = []

    # детур может встать перед любым шагом плана и перед ANSWER
    for planned in plan + [None]:
        if detour_rate > 0 and rng.random() < detour_rate:
            extra = _detour(state, query, rng)
            if extra is not None:
                step, state = _do(state, extra, len(steps), noise, rng, clip)
                steps.append(step)
        if planned is None:
            break
        step, state = _do(state, planned, len(steps), noise, rng, clip)
        steps.append(step)

    answer = answer_from_evidence(state, query.kind)
    if answer is None:
        answer = -1
    shortest = len(plan) + 1
    components = score_components(steps, answer, query.answer, shortest)
    return TeacherTrace(
        query=query,
        clip_id=clip.clip_id,
        steps=steps,
        answer=int(answer),
        components=components,
        shortest_len=shortest,
        seed=int(seed),
    )


def _do(state: EpisodeState, call: ToolCall, step: int, noise: NoiseConfig,
        rng: np.random.Generator, clip: Clip) -> Tuple[TraceStep, EpisodeState]:
    call = ToolCall(call.op, call.arg, step)
    new_state, obs, decisive = run_call(state, call, noise, rng)
    verified, fidelity = verify_step(obs, clip)
    return TraceStep(call=call, obs=obs, decisive=decisive, verified=verified, fidelity=fidelity), new_state


def generate_teacher_traces(
    clip: Clip,
    query: Query,
    k: int,
    noise: Optional[NoiseConfig] = None,
    teacher: Optional[TeacherConfig] = None,
    seed: int = 0,
) -> List[TeacherTrace]:
    """
    k траекторий по плану из разметки с вставкой детуров.
    Каждая помечена accepted по правилу S(τ) ≥ τ0 ∧ все шаги прошли.
    """
    validate_query(clip, query)
    noise = noise or NoiseConfig()
    teacher = teacher or TeacherConfig()
    traces = []
    for i in range(k):
        trace = run_teacher_once(clip, query, noise, teacher.detour_rate, seed + i)
        trace.accepted = accept_trace(trace, teacher.accept_weights, teacher.accept_tau0)
        traces.append(trace)
    rejected = sum(1 for t in traces if not t.accepted)
    if rejected:
        logger.debug(f"Teacher: {query.query_id} rejected {rejected}/{k} traces")
    return traces


def decisive_rate(traces: Sequence[TeacherTrace]) -> float:
    """Доля decisive среди инструментальных шагов принятого пула."""
    flags = [s.decisive for t in traces if t.accepted for s in t.steps]
    if not flags:
        return 0.0
    return float(np.mean(flags))


if __name__ == "__main__":
    from config import WorldConfig
    from toyworld.scene import generate_clip, make_query

    clip = generate_clip(WorldConfig(), seed=7)
    query = make_query(clip, "attribute", make_rng(7, "query"))
    for t in generate_teacher_traces(clip, query, k=3, seed=7):
        print([s.call.token() for s in t.steps], "→", t.answer, t.components, t.accepted)
