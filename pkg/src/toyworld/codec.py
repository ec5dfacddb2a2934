# src/toyworld/codec.py

import dataclasses
import json
from typing import Any, Dict

import numpy as np

from config import run_config_from_dict
from toyworld.scene import Clip, Footprint, Query, SceneObject
from toyworld.teacher import TeacherTrace, TraceStep
from toyworld.tools import Observation, ToolCall

# Версия формата записей. Меняется только вместе с decode_*.
RECORD_VERSION = 1
CLIP_SCHEMA = "pixelsoul.clip"
TRACE_SCHEMA = "pixelsoul.trace"


def canonical_json(record: Dict[str, Any]) -> str:
    """Одна запись = одна строка; порядок ключей фиксирован, чтобы хэши совпадали побитово."""
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def schema_header(schema: str) -> Dict[str, Any]:
    return {"schema": schema, "version": RECORD_VERSION}


# ---------------------------------------------------------------------------------
# НАБЛЮДЕНИЯ
# ---------------------------------------------------------------------------------

def encode_observation(obs: Observation) -> Dict[str, Any]:
    payload = {}
    for k, v in obs.payload.items():
        payload[k] = v.astype(int).tolist() if isinstance(v, np.ndarray) else v
    return {
        "op": obs.op,
        "payload": payload,
        "success": obs.success,
        "footprint": obs.footprint.to_list(),
        "confidence": obs.confidence,
        "valid_call": obs.valid_call,
    }


def decode_observation(rec: Dict[str, Any]) -> Observation:
    payload = dict(rec["payload"])
    if "mask" in payload:
        payload["mask"] = np.asarray(payload["mask"], dtype=bool)
    return Observation(
        op=rec["op"],
        payload=payload,
        success=rec["success"],
        footprint=Footprint.from_list(rec["footprint"]),
        confidence=rec["confidence"],
        valid_call=rec["valid_call"],
    )


# ---------------------------------------------------------------------------------
# КЛИПЫ
# ---------------------------------------------------------------------------------

def encode_clip(clip: Clip) -> Dict[str, Any]:
    return {
        "clip_id": clip.clip_id,
        "seed": clip.seed,
        "world": dataclasses.asdict(clip.world),
        "frames": clip.frames.tolist(),
        "objects": [
            {
                "id": o.id,
                "cls": o.cls,
                "boxes": o.boxes.tolist(),
                "mask": o.mask.astype(int).tolist(),
                "text": o.text,
                "attributes": o.attributes,
            }
            for o in clip.objects
        ],
        "events": [list(e) for e in clip.events],
    }


def decode_clip(rec: Dict[str, Any]) -> Clip:
    world = run_config_from_dict({"world": rec["world"]}).world
    objects = [
        SceneObject(
            id=o["id"],
            cls=o["cls"],
            boxes=np.asarray(o["boxes"], dtype=np.int64),
            mask=np.asarray(o["mask"], dtype=bool),
            text=o["text"],
            attributes=dict(o["attributes"]),
        )
        for o in rec["objects"]
    ]
    return Clip(
        clip_id=rec["clip_id"],
        seed=rec["seed"],
        world=world,
        frames=np.asarray(rec["frames"], dtype=np.int64),
        objects=objects,
        events=[tuple(e) for e in rec["events"]],
    )


# ---------------------------------------------------------------------------------
# ТРАЕКТОРИИ УЧИТЕЛЯ
# ---------------------------------------------------------------------------------

def encode_query(q: Query) -> Dict[str, Any]:
    return {"query_id": q.query_id, "kind": q.kind, "target_region": q.target_region,
            "object_id": q.object_id, "answer": q.answer}


def decode_query(rec: Dict[str, Any]) -> Query:
    return Query(rec["query_id"], rec["kind"], rec["target_region"], rec["object_id"], rec["answer"])


def encode_trace(trace: TeacherTrace) -> Dict[str, Any]:
    return {
        "query": encode_query(trace.query),
        "clip_id": trace.clip_id,
        "steps": [
            {
                "op": s.call.op,
                "arg": s.call.arg,
                "step": s.call.step,
                "obs": encode_observation(s.obs),
                "decisive": s.decisive,
                "verified": s.verified,
                "fidelity": s.fidelity,
            }
            for s in trace.steps
        ],
        "answer": trace.answer,
        "components": list(trace.components),
        "shortest_len": trace.shortest_len,
        "seed": trace.seed,
        "accepted": trace.accepted,
    }


def decode_trace(rec: Dict[str, Any]) -> TeacherTrace:
    steps = [
        TraceStep(
            call=ToolCall(s["op"], s["arg"], s["step"]),
            obs=decode_observation(s["obs"]),
            decisive=s["decisive"],
            verified=s["verified"],
            fidelity=s["fidelity"],
        )
        for s in rec["steps"]
    ]
    return TeacherTrace(
        query=decode_query(rec["query"]),
        clip_id=rec["clip_id"],
        steps=steps,
        answer=rec["answer"],
        components=tuple(rec["components"]),
        shortest_len=rec["shortest_len"],
        seed=rec["seed"],
        accepted=rec["accepted"],
    )
