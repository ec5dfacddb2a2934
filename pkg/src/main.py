# src/main.py
from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

CURRENT_DIR = os.path.dirname(os.path.abspath(__file__))
if CURRENT_DIR not in sys.path:
    sys.path.insert(0, CURRENT_DIR)

from config import STAGES, RunConfig, load_run_config, settings
from router.tools_router import ToolRouter
from utils.errors import ConfigError
from utils.logger import get_logger

log = get_logger("pixelsoul-cli")

# ---- КОДЫ ВЫХОДА ----
EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_REPLAY = 4

EXIT_BY_ERROR = {"config": EXIT_CONFIG, "dependency": EXIT_DEPENDENCY, "replay": EXIT_REPLAY}
VERBS = STAGES + ("replay", "run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pixelsoul", description="PixelSoul: стадии прогона и повтор TTRL-лога")
    parser.add_argument("verb", choices=VERBS)
    parser.add_argument("--config", help="JSON-конфиг прогона (по умолчанию значения по умолчанию)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", dest="out_dir")
    parser.add_argument("--variant")
    parser.add_argument("--budget", type=int)
    parser.add_argument("--log", help="путь к ttrl_log.jsonl для replay")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings.ensure_env_ready()
    try:
        cfg = load_run_config(args.config) if args.config else RunConfig()
    except ConfigError as e:
        log.error(f"CLI: config rejected: {e}")
        print(json.dumps({"ok": False, "error": "config", "field": e.field, "message": str(e)}, ensure_ascii=False))
        return EXIT_CONFIG

    command = {
        "action": args.verb,
        "seed": args.seed,
        "out_dir": args.out_dir,
        "variant": args.variant,
        "budget": args.budget,
        "log": args.log,
    }
    response = ToolRouter(cfg).execute(command)
    print(json.dumps(response, ensure_ascii=False, indent=2, default=str))

    if response["ok"]:
        return EXIT_OK
    if "error" in response:
        return EXIT_BY_ERROR.get(response["error"], EXIT_OTHER)
    # replay отработал, но нашёл расхождение
    return EXIT_REPLAY if args.verb == "replay" else EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
