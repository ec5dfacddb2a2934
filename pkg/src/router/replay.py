# src/router/replay.py

import os
import sys
from pathlib import Path
from typing import Any, Dict, List

CURRENT_DIR = os.path.dirname(os.path.abspath(__file__))
SRC_DIR = os.path.dirname(CURRENT_DIR)
if SRC_DIR not in sys.path:
    sys.path.insert(0, SRC_DIR)

from config import run_config_from_dict
from data_layer.run_store import RunStore, file_sha256
from router.main_router import TTRL_SCHEMA, PixelSoulRouter
from toyworld.codec import canonical_json
from ttrl.online import run_online
from utils.errors import ReplayError
from utils.logger import get_logger

logger = get_logger("pixelsoul-replay")


class _Diverged(Exception):
    """Внутренний сигнал: остановить прогон на первой расхождении."""


def _diff_fields(expected: Dict[str, Any], actual: Dict[str, Any]) -> List[str]:
    keys = sorted(set(expected) | set(actual))
    return [k for k in keys if canonical_json({"v": expected.get(k)}) != canonical_json({"v": actual.get(k)})]


def replay(log_path: str) -> Dict[str, Any]:
    """
    Повторяет онлайн-прогон по заголовку лога: тот же конфиг, тот же чекпоинт, тот же seed.
    Записи сравниваются побайтно в каноническом JSON; вердикт fail указывает первую расходящуюся запись.
    """
    path = Path(log_path)
    header, records = RunStore.iter_stream(path, TTRL_SCHEMA)
    logged = list(records)
    for field in ("config", "artifacts", "checkpoint_sha256", "seed"):
        if field not in header:
            raise ReplayError(f"Replay: в заголовке {path.name} нет поля {field!r}")

    cfg = run_config_from_dict(header["config"])
    store = RunStore(str(path.parent.parent), path.parent.name)
    router = PixelSoulRouter(cfg, store=store)
    artifacts = header["artifacts"]
    ckpt_path = store.root / artifacts["checkpoint"]
    if not ckpt_path.exists():
        raise ReplayError(f"Replay: чекпоинт {artifacts['checkpoint']} не найден")
    if file_sha256(ckpt_path) != header["checkpoint_sha256"]:
        raise ReplayError(f"Replay: чекпоинт {artifacts['checkpoint']} изменился после прогона")

    state, stream, probe, ctx = router.ttrl_setup(artifacts)
    seen = 0
    divergence: Dict[str, Any] = {}

    def check(rec: Dict[str, Any]) -> None:
        nonlocal seen
        if seen >= len(logged):
            divergence.update({"index": seen, "step": rec.get("step"), "query_id": rec.get("query_id"),
                               "fields": ["<extra record>"]})
            raise _Diverged()
        expected = logged[seen]
        if canonical_json(expected) != canonical_json(rec):
            divergence.update({"index": seen, "step": expected.get("step"), "query_id": expected.get("query_id"),
                               "fields": _diff_fields(expected, rec)})
            raise _Diverged()
        seen += 1

    logger.info(f"Replay: {path.name} records={len(logged)} seed={header['seed']}")
    try:
        run_online(state, stream, probe, ctx, cfg.ttrl, budget=len(logged), seed=header["seed"], on_record=check)
    except _Diverged:
        pass

    ok = not divergence and seen == len(logged)
    if ok:
        logger.info(f"Replay: {path.name} pass ({seen} records)")
    else:
        logger.warning(f"Replay: {path.name} diverged at record {divergence.get('index', seen)}")
    return {
        "ok": ok,
        "verdict": "pass" if ok else "fail",
        "records": len(logged),
        "matched": seen,
        "first_divergence": divergence or None,
    }


if __name__ == "__main__":
    if len(sys.argv) < 2:
        print("usage: python ./src/router/replay.py runs/<run_id>/ttrl_log.jsonl")
        sys.exit(1)
    print("🔁 replay ->", replay(sys.argv[1]))
