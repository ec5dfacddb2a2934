# src/data_layer/run_store.py

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple

from toyworld.codec import RECORD_VERSION, canonical_json, schema_header
from utils.errors import DependencyError, ReplayError
from utils.logger import get_logger

logger = get_logger("pixelsoul-store")

# Важно:
# - этот модуль — "официальный канал" записи артефактов прогона
# - роутер, TTRL и replay пишут и читают только через RunStore, а не open() напрямую,
#   чтобы правила версий и append-only были одинаковыми


def make_trace_id(config_hash: str) -> str:
    """
    ID прогона формата PXS-<12 hex>: первые 12 символов sha256 конфига.
    Один и тот же конфиг всегда попадает в одну и ту же папку.
    """
    return "PXS-" + config_hash[:12]


class RunStore:
    """
    RunStore — папка одного прогона. Здесь мы храним JSONL-потоки (первая строка —
    заголовок схемы), JSON-отчёты, чекпоинты и кривые для графиков.
    Существующие файлы никогда не перезаписываются: повторная запись получает суффикс .1, .2, ...
    """

    def __init__(self, out_dir: str, run_id: str):
        self.root = Path(out_dir) / run_id
        self.run_id = run_id
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def for_config_hash(out_dir: str, config_hash: str) -> "RunStore":
        return RunStore(out_dir, make_trace_id(config_hash))

    # ---------------------------------------------------------------------------------
    # ИМЕНА ФАЙЛОВ
    # ---------------------------------------------------------------------------------

    def _versions(self, name: str) -> List[Path]:
        base = self.root / name
        found = [base] if base.exists() else []
        i = 1
        while (self.root / f"{name}.{i}").exists():
            found.append(self.root / f"{name}.{i}")
            i += 1
        return found

    def fresh_path(self, name: str) -> Path:
        """Свободное имя: name, затем name.1, name.2 ..."""
        taken = self._versions(name)
        if not taken:
            return self.root / name
        return self.root / f"{name}.{len(taken)}"

    def latest(self, name: str) -> Optional[Path]:
        """Последняя записанная версия файла или None."""
        taken = self._versions(name)
        return taken[-1] if taken else None

    def require(self, name: str, stage: str) -> Path:
        path = self.latest(name)
        if path is None:
            raise DependencyError(f"{stage}: нет артефакта {name} в {self.root} (запустите предыдущую стадию)")
        return path

    # ---------------------------------------------------------------------------------
    # JSONL-ПОТОКИ
    # ---------------------------------------------------------------------------------

    def start_stream(self, name: str, schema: str, meta: Optional[Dict[str, Any]] = None) -> Path:
        """Новый поток: первая строка — заголовок {"schema", "version", ...meta}."""
        path = self.fresh_path(name)
        header = {**schema_header(schema), **(meta or {})}
        with open(path, "x", encoding="utf-8") as fh:
            fh.write(canonical_json(header) + "\n")
        return path

    @staticmethod
    def append(path: Path, record: Dict[str, Any]) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(canonical_json(record) + "\n")

    def write_stream(self, name: str, schema: str, records: Iterable[Dict[str, Any]],
                     meta: Optional[Dict[str, Any]] = None) -> Path:
        path = self.start_stream(name, schema, meta)
        with open(path, "a", encoding="utf-8") as fh:
            for rec in records:
                fh.write(canonical_json(rec) + "\n")
        return path

    @staticmethod
    def iter_stream(path: Path, schema: Optional[str] = None) -> Tuple[Dict[str, Any], Iterator[Dict[str, Any]]]:
        """
        Заголовок и итератор записей. Чужая схема или версия — ReplayError,
        битая строка — ReplayError с номером строки.
        """
        path = Path(path)
        if not path.exists():
            raise ReplayError(f"Store: лог не найден: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError:
            raise ReplayError(f"Store: {path} не начинается с заголовка схемы")
        if not isinstance(header, dict) or "schema" not in header:
            raise ReplayError(f"Store: {path} не начинается с заголовка схемы")
        if schema is not None and header["schema"] != schema:
            raise ReplayError(f"Store: {path} имеет схему {header['schema']!r}, ожидалась {schema!r}")
        if header.get("version") != RECORD_VERSION:
            raise ReplayError(f"Store: версия {header.get('version')} не поддерживается (нужна {RECORD_VERSION})")

        def records() -> Iterator[Dict[str, Any]]:
            with open(path, "r", encoding="utf-8") as fh:
                fh.readline()
                for n, line in enumerate(fh, start=2):
                    if not line.strip():
                        continue
                    try:
                        yield json.loads(line)
                    except json.JSONDecodeError:
                        raise ReplayError(f"Store: {path}:{n} битая строка")

        return header, records()

    def read_stream(self, path: Path, schema: Optional[str] = None) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
        header, it = self.iter_stream(path, schema)
        return header, list(it)

    # ---------------------------------------------------------------------------------
    # ОТЧЁТЫ И ТЕКСТ
    # ---------------------------------------------------------------------------------

    def write_json(self, name: str, data: Dict[str, Any]) -> Path:
        path = self.fresh_path(name)
        with open(path, "x", encoding="utf-8") as fh:
            json.dump(data, fh, ensure_ascii=False, indent=2, sort_keys=True, allow_nan=True)
        return path

    def read_json(self, name: str, stage: str = "Store") -> Dict[str, Any]:
        with open(self.require(name, stage), "r", encoding="utf-8") as fh:
            return json.load(fh)

    def write_text(self, name: str, text: str) -> Path:
        path = self.fresh_path(name)
        with open(path, "x", encoding="utf-8") as fh:
            fh.write(text)
        return path

    def read_text(self, name: str, stage: str = "Store") -> str:
        with open(self.require(name, stage), "r", encoding="utf-8") as fh:
            return fh.read()


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# Быстрый линейный тест (локально)
if __name__ == "__main__":
    store = RunStore(os.path.join("runs", "_demo"), make_trace_id("0" * 64))
    log = store.start_stream("demo.jsonl", "pixelsoul.demo", {"seed": 0})
    store.append(log, {"step": 0, "kl": 0.12})
    print("📝 stream ->", log)
    print("📖 read ->", store.read_stream(log, "pixelsoul.demo"))
