"""
tools_router.py — связующее звено между внешним вызовом (CLI, скрипт, ноутбук) и PixelSoulRouter.
Принимает команду-словарь, выполняет стадию и всегда возвращает JSON-совместимый ответ,
даже если стадия упала.
"""

import os
import sys
from typing import Any, Dict, Optional

# Подключаем пути к src, чтобы импортировать PixelSoulRouter
CURRENT_DIR = os.path.dirname(os.path.abspath(__file__))
SRC_DIR = os.path.dirname(CURRENT_DIR)
if SRC_DIR not in sys.path:
    sys.path.insert(0, SRC_DIR)

from config import STAGES, RunConfig, apply_overrides
from router.main_router import PixelSoulRouter
from router.replay import replay
from utils.errors import ConfigError, DependencyError, PixelSoulError, ReplayError
from utils.logger import get_logger

logger = get_logger("pixelsoul-tools")

ERROR_KINDS = (
    (ConfigError, "config"),
    (DependencyError, "dependency"),
    (ReplayError, "replay"),
)


def error_kind(exc: BaseException) -> str:
    for cls, kind in ERROR_KINDS:
        if isinstance(exc, cls):
            return kind
    return "internal" if isinstance(exc, PixelSoulError) else "other"


class ToolRouter:
    def __init__(self, cfg: Optional[RunConfig] = None):
        self.cfg = cfg or RunConfig()

    def _router(self, command: Dict[str, Any]) -> PixelSoulRouter:
        cfg = apply_overrides(
            self.cfg,
            seed=command.get("seed"),
            out_dir=command.get("out_dir"),
            variant=command.get("variant"),
            budget=command.get("budget"),
        )
        return PixelSoulRouter(cfg)

    def _dispatch(self, action: str, command: Dict[str, Any]) -> Dict[str, Any]:
        if action == "replay":
            log = command.get("log")
            if not log:
                raise ConfigError("replay: не указан путь к логу", field="log")
            return replay(log)
        if action == "run":
            return self._router(command).run_pipeline()
        if action in STAGES:
            return self._router(command).run_stage(action)
        raise ConfigError(f"неизвестное действие: {action!r}", field="action")

    def execute(self, command: Dict[str, Any]) -> Dict[str, Any]:
        """
        Принимает словарь вида:
        {"action": "ttrl", "seed": 3, "variant": "hard_majority", "budget": 200}
        Возвращает {"ok", "action", "result", "message"}; при ошибке ещё и "error".
        """
        action = command.get("action")
        try:
            result = self._dispatch(action, command)
        except Exception as e:
            kind = error_kind(e)
            field = getattr(e, "field", None)
            logger.error(f"Tools: {action} failed ({kind}): {e}")
            return {
                "ok": False,
                "action": action,
                "error": kind,
                "field": field,
                "message": str(e),
            }
        return {
            "ok": bool(result.get("ok", True)),
            "action": action,
            "result": result,
            "message": result.get("message") or f"{action}: {result.get('verdict', 'ok')}",
        }


if __name__ == "__main__":
    # Локальная проверка работы
    tools = ToolRouter()

    demo_cmds = [
        {"action": "generate", "out_dir": "runs/_demo"},
        {"action": "ttrl", "out_dir": "runs/_demo_empty"},
        {"action": "dance"},
    ]
    for cmd in demo_cmds:
        print("🧪", cmd["action"], "->", tools.execute(cmd)["message"])
