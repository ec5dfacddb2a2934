# src/layout_engine/plot_export.py

from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from data_layer.run_store import RunStore
from metrics.selective import CurvePoint
from utils.logger import get_logger

logger = get_logger("pixelsoul-layout")

# Вёрстка здесь только числовая: файлы "# ключ: значение" + колонки через пробел.
# Картинки рисует кто угодно снаружи.


def fmt(x: Any) -> str:
    """Числа пишутся через repr(float): совпадают побитово с тем, что лежит в JSON-отчёте."""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, int):
        return str(x)
    return repr(float(x))


def render_series(columns: Sequence[str], rows: Sequence[Sequence[Any]],
                  meta: Optional[Mapping[str, Any]] = None) -> str:
    lines = [f"# {k}: {v}" for k, v in (meta or {}).items()]
    if not rows:
        lines.append("# empty: true")
    lines.append(" ".join(columns))
    lines.extend(" ".join(fmt(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def parse_series(text: str) -> Tuple[Dict[str, str], List[str], List[List[float]]]:
    """Обратное чтение: метаданные, имена колонок, строки чисел."""
    meta: Dict[str, str] = {}
    columns: List[str] = []
    rows: List[List[float]] = []
    for line in text.splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition(": ")
            meta[key] = value
        elif not columns:
            columns = line.split()
        elif line.strip():
            rows.append([float(v) for v in line.split()])
    return meta, columns, rows


def _write(store: RunStore, name: str, columns: Sequence[str], rows: Sequence[Sequence[Any]],
           meta: Optional[Mapping[str, Any]] = None) -> Path:
    if not rows:
        logger.warning(f"Plots: series {name} is empty, writing flagged header only")
    return store.write_text(name, render_series(columns, rows, meta))


# ---------------------------------------------------------------------------------
# СЕРИИ
# ---------------------------------------------------------------------------------

def export_accuracy(store: RunStore, series: Sequence[Sequence[float]]) -> Path:
    return _write(store, "plot_accuracy.txt", ("update", "accuracy"), [(int(u), a) for u, a in series],
                  {"series": "probe accuracy over updates"})


def export_kl(store: RunStore, kl_series: Sequence[float], corridor: Tuple[float, float]) -> Path:
    lo, hi = corridor
    return _write(store, "plot_kl.txt", ("update", "kl"), list(enumerate(kl_series)),
                  {"series": "step KL to EMA over updates", "corridor_min": fmt(lo), "corridor_max": fmt(hi)})


def export_risk_coverage(store: RunStore, points: Sequence[CurvePoint]) -> Path:
    """Точки по убыванию coverage; разрывы (ни одного ответа) не пишутся, их число — в метаданных."""
    kept = sorted((p for p in points if not p.gap), key=lambda p: (-p.coverage, p.delta))
    rows = [(p.coverage, p.err_sel, p.delta) for p in kept]
    return _write(store, "plot_risk_coverage.txt", ("coverage", "err_sel", "delta"), rows,
                  {"series": "risk-coverage", "gaps": len(points) - len(kept)})


def export_bars(store: RunStore, bars: Mapping[str, Mapping[str, float]]) -> Path:
    """bars: {metric: {"value", "ci_low", "ci_high"}} — те же числа, что в metrics.json."""
    names = sorted(bars)
    rows = [(i, bars[n]["value"], bars[n]["ci_low"], bars[n]["ci_high"]) for i, n in enumerate(names)]
    return _write(store, "plot_bars.txt", ("index", "value", "ci_low", "ci_high"), rows,
                  {"series": "process metrics with bootstrap CI", "metrics": ",".join(names)})


def export_plots(store: RunStore, report: Mapping[str, Any], corridor: Tuple[float, float]) -> List[Path]:
    """
    Все кривые из отчёта метрик. Отсутствующая серия даёт файл-заглушку
    с заголовком и флагом empty, чтобы набор файлов был одинаковым.
    """
    points = [CurvePoint(**p) for p in report.get("risk_coverage", [])]
    return [
        export_accuracy(store, report.get("accuracy_series", [])),
        export_kl(store, report.get("kl_series", []), corridor),
        export_risk_coverage(store, points),
        export_bars(store, report.get("bars", {})),
    ]
