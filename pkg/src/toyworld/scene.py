# src/toyworld/scene.py

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import WorldConfig
from utils.errors import ConfigError, GenerationError
from utils.seeding import derive_seed, make_rng

# Алфавит действий: шесть инструментов плюс терминальный ANSWER.
OPS = ("SEG", "ZOOM", "TRK", "OCR", "TEMP", "PROP", "ANSWER")
REGION_OPS = ("SEG", "ZOOM", "TRK", "OCR", "PROP")
TOOL_OPS = OPS[:-1]
GRID_BINS = 4
N_REGIONS = GRID_BINS * GRID_BINS
ZOOM_MARGIN = 4
N_EVENT_LABELS = 4


def glyph(i: int) -> str:
    return chr(ord("A") + i)


def glyph_index(ch: str) -> int:
    return ord(ch) - ord("A")


# ---------------------------------------------------------------------------------
# ГЕОМЕТРИЯ
# ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return max(0, self.w) * max(0, self.h)

    def intersect(self, other: "Rect") -> Optional["Rect"]:
        x0, y0 = max(self.x, other.x), max(self.y, other.y)
        x1 = min(self.x + self.w, other.x + other.w)
        y1 = min(self.y + self.h, other.y + other.h)
        if x1 <= x0 or y1 <= y0:
            return None
        return Rect(x0, y0, x1 - x0, y1 - y0)

    def union_bounds(self, other: "Rect") -> "Rect":
        x0, y0 = min(self.x, other.x), min(self.y, other.y)
        x1 = max(self.x + self.w, other.x + other.w)
        y1 = max(self.y + self.h, other.y + other.h)
        return Rect(x0, y0, x1 - x0, y1 - y0)

    def center(self) -> Tuple[int, int]:
        return self.x + self.w // 2, self.y + self.h // 2

    def as_list(self) -> List[int]:
        return [self.x, self.y, self.w, self.h]

    def cell_mask(self, height: int, width: int) -> np.ndarray:
        m = np.zeros((height, width), dtype=bool)
        m[max(0, self.y):self.y + self.h, max(0, self.x):self.x + self.w] = True
        return m


@dataclass(frozen=True)
class Footprint:
    """Пространственно-временной след шага: прямоугольник × отрезок кадров (включительно)."""
    rect: Rect
    f0: int
    f1: int

    @property
    def volume(self) -> int:
        return self.rect.area * (self.f1 - self.f0 + 1)

    def overlap(self, other: "Footprint") -> int:
        inter = self.rect.intersect(other.rect)
        frames = min(self.f1, other.f1) - max(self.f0, other.f0) + 1
        if inter is None or frames <= 0:
            return 0
        return inter.area * frames

    def iou(self, other: "Footprint") -> float:
        inter = self.overlap(other)
        union = self.volume + other.volume - inter
        return inter / union if union > 0 else 0.0

    def to_list(self) -> List[int]:
        return self.rect.as_list() + [self.f0, self.f1]

    @staticmethod
    def from_list(v: List[int]) -> "Footprint":
        return Footprint(Rect(v[0], v[1], v[2], v[3]), v[4], v[5])


def region_rect(region: int, height: int, width: int) -> Rect:
    bx, by = region % GRID_BINS, region // GRID_BINS
    x0, x1 = bx * width // GRID_BINS, (bx + 1) * width // GRID_BINS
    y0, y1 = by * height // GRID_BINS, (by + 1) * height // GRID_BINS
    return Rect(x0, y0, x1 - x0, y1 - y0)


def region_of_point(x: int, y: int, height: int, width: int) -> int:
    bx = min(GRID_BINS - 1, x * GRID_BINS // width)
    by = min(GRID_BINS - 1, y * GRID_BINS // height)
    return by * GRID_BINS + bx


def zoom_rect(region: int, height: int, width: int) -> Rect:
    r = region_rect(region, height, width)
    x0, y0 = max(0, r.x - ZOOM_MARGIN), max(0, r.y - ZOOM_MARGIN)
    x1 = min(width, r.x + r.w + ZOOM_MARGIN)
    y1 = min(height, r.y + r.h + ZOOM_MARGIN)
    return Rect(x0, y0, x1 - x0, y1 - y0)


# ---------------------------------------------------------------------------------
# СЦЕНА
# ---------------------------------------------------------------------------------

@dataclass
class SceneObject:
    id: int
    cls: int
    boxes: np.ndarray            # (F, 4): x, y, w, h по кадрам
    mask: np.ndarray             # (h, w) bool, патч внутри рамки
    text: str = ""
    attributes: Dict[str, int] = field(default_factory=dict)

    def box_at(self, f: int) -> Rect:
        x, y, w, h = (int(v) for v in self.boxes[f])
        return Rect(x, y, w, h)

    def mask_at(self, f: int, height: int, width: int) -> np.ndarray:
        full = np.zeros((height, width), dtype=bool)
        b = self.box_at(f)
        full[b.y:b.y + b.h, b.x:b.x + b.w] = self.mask
        return full

    def region_at(self, f: int, height: int, width: int) -> int:
        cx, cy = self.box_at(f).center()
        return region_of_point(cx, cy, height, width)


@dataclass
class Clip:
    clip_id: str
    seed: int
    world: WorldConfig
    frames: np.ndarray                         # (F, H, W) коды клеток
    objects: List[SceneObject]
    events: List[Tuple[int, int, int]]         # (label, start, end), включительно

    @property
    def height(self) -> int:
        return int(self.frames.shape[1])

    @property
    def width(self) -> int:
        return int(self.frames.shape[2])

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    def object_by_id(self, obj_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.id == obj_id:
                return obj
        raise KeyError(obj_id)

    def full_rect(self) -> Rect:
        return Rect(0, 0, self.width, self.height)


@dataclass(frozen=True)
class ViewState:
    rect: Rect
    f0: int
    f1: int

    @staticmethod
    def full(clip: Clip) -> "ViewState":
        return ViewState(clip.full_rect(), 0, clip.n_frames - 1)

    def is_zoomed(self, clip: Clip) -> bool:
        return self.rect.area < clip.height * clip.width


@dataclass(frozen=True)
class Query:
    query_id: str
    kind: str
    target_region: int
    object_id: int
    answer: int

    def tokens(self) -> List[str]:
        return [f"kind:{self.kind}", f"region:{self.target_region}"]


def _check_world(world: WorldConfig) -> None:
    if world.height * world.width <= 0:
        raise ConfigError("H·W должно быть > 0", field="world.height")
    if world.frames < 1:
        raise ConfigError("нужен хотя бы один кадр", field="world.frames")
    if world.n_objects > N_REGIONS:
        raise ConfigError("объектов больше, чем регионов", field="world.n_objects")
    if world.max_size + 2 > min(world.height, world.width) // GRID_BINS + ZOOM_MARGIN:
        raise ConfigError("объект не помещается в увеличенный регион", field="world.max_size")


def _random_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    # эллипс внутри рамки + случайно срезанные углы; центр всегда заполнен
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ry, rx = max(h / 2.0, 1.0), max(w / 2.0, 1.0)
    mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0 + rng.uniform(0.0, 0.6)
    mask[h // 2, w // 2] = True
    return mask


def generate_clip(world: WorldConfig, seed: int, clip_id: Optional[str] = None) -> Clip:
    """
    Детерминированная синтетическая сцена. Одинаковые (world, seed) дают
    побитово одинаковый клип.
    """
    _check_world(world)
    rng = make_rng(seed, "clip")
    H, W, F = world.height, world.width, world.frames
    vmax = world.velocity_cap + world.velocity_shift

    regions = rng.permutation(N_REGIONS)[: world.n_objects]
    moving = set(rng.permutation(world.n_objects)[: world.moving_objects].tolist())

    objects: List[SceneObject] = []
    for i, region in enumerate(regions.tolist()):
        w = int(rng.integers(world.min_size, world.max_size + 1))
        h = int(rng.integers(world.min_size, world.max_size + 1))
        cell = region_rect(region, H, W)
        cx = cell.x + int(rng.integers(0, cell.w))
        cy = cell.y + int(rng.integers(0, cell.h))
        x = int(np.clip(cx - w // 2, 0, W - w))
        y = int(np.clip(cy - h // 2, 0, H - h))

        vx = vy = 0
        if i in moving and vmax > 0:
            while vx == 0 and vy == 0:
                vx = int(rng.integers(-vmax, vmax + 1))
                vy = int(rng.integers(-vmax, vmax + 1))

        boxes = np.zeros((F, 4), dtype=np.int64)
        for f in range(F):
            boxes[f] = (x, y, w, h)
            nx, ny = x + vx, y + vy
            if nx < 0 or nx > W - w:
                vx = -vx
                nx = x + vx
            if ny < 0 or ny > H - h:
                vy = -vy
                ny = y + vy
            x, y = nx, ny

        text = ""
        if rng.random() < world.text_rate:
            length = int(rng.integers(2, 5))
            text = "".join(glyph(int(g)) for g in rng.integers(0, world.glyph_alphabet, size=length))

        attributes = {
            "color": int(rng.integers(0, world.n_colors)),
            "size": int(w * h > (world.min_size + world.max_size) ** 2 // 4),
        }
        objects.append(SceneObject(
            id=i,
            cls=int(rng.integers(0, world.n_classes)),
            boxes=boxes,
            mask=_random_mask(rng, h, w),
            text=text,
            attributes=attributes,
        ))

    events: List[Tuple[int, int, int]] = []
    for _ in range(world.n_events):
        start = int(rng.integers(0, F))
        end = int(rng.integers(start, F))
        events.append((int(rng.integers(0, N_EVENT_LABELS)), start, end))

    frames = np.full((F, H, W), world.brightness_shift, dtype=np.int64)
    for f in range(F):
        for obj in objects:
            frames[f][obj.mask_at(f, H, W)] = 1 + obj.cls + world.brightness_shift

    return Clip(
        clip_id=clip_id or f"clip-{seed}",
        seed=int(seed),
        world=world,
        frames=frames,
        objects=objects,
        events=events,
    )


# ---------------------------------------------------------------------------------
# ЗАПРОСЫ И ОТВЕТЫ ПО РАЗМЕТКЕ
# ---------------------------------------------------------------------------------

def quadrant_of(rect: Rect, height: int, width: int) -> int:
    cx, cy = rect.center()
    return int(cy * 2 // height) * 2 + int(cx * 2 // width)


def start_bin(start: int, n_frames: int, n_answers: int) -> int:
    return min(n_answers - 1, start * n_answers // n_frames)


def target_event(clip: Clip, window_start: int = 0) -> Optional[int]:
    """Событие с наибольшим перекрытием окна [window_start, F); при равенстве — длиннее, затем раньше."""
    best, best_key = None, None
    for idx, (_, s, e) in enumerate(clip.events):
        overlap = min(e, clip.n_frames - 1) - max(s, window_start) + 1
        if overlap <= 0:
            continue
        key = (overlap, e - s, -s)
        if best_key is None or key > best_key:
            best, best_key = idx, key
    return best


def seg_target(clip: Clip, region: int, view: ViewState) -> Optional[SceneObject]:
    """Объект с максимальным перекрытием маски с регионом ∩ вид (ничья → меньший id)."""
    area = region_rect(region, clip.height, clip.width).intersect(view.rect)
    if area is None:
        return None
    window = area.cell_mask(clip.height, clip.width)
    best, best_overlap = None, 0
    for obj in clip.objects:
        overlap = int(np.count_nonzero(obj.mask_at(view.f0, clip.height, clip.width) & window))
        if overlap > best_overlap:
            best, best_overlap = obj, overlap
    return best


def truth_answer(clip: Clip, kind: str, obj: Optional[SceneObject]) -> int:
    C = clip.world.n_answers
    if kind == "read_text":
        return glyph_index(obj.text[0]) % C
    if kind == "attribute":
        return obj.attributes["color"] % C
    if kind == "track":
        return quadrant_of(obj.box_at(clip.n_frames - 1), clip.height, clip.width) % C
    if kind == "temporal":
        _, s, _ = clip.events[target_event(clip)]
        return start_bin(s, clip.n_frames, C)
    raise GenerationError(f"Query: неизвестный тип {kind!r}")


def make_query(clip: Clip, kind: str, rng: np.random.Generator, query_id: Optional[str] = None) -> Query:
    """Собирает отвечаемый запрос нужного типа; если таких целей нет — GenerationError."""
    qid = query_id or f"{clip.clip_id}:{kind}"
    full = ViewState.full(clip)
    if kind == "temporal":
        if clip.n_frames < 2 or target_event(clip) is None:
            raise GenerationError(f"Query {qid}: в клипе нет событий для temporal")
        return Query(qid, kind, 0, -1, truth_answer(clip, kind, None))

    candidates = []
    for obj in clip.objects:
        if kind == "read_text" and not obj.text:
            continue
        region = obj.region_at(0, clip.height, clip.width)
        # цель должна однозначно выбираться SEG/OCR по своему региону
        if seg_target(clip, region, full) is not obj:
            continue
        if kind == "read_text":
            zoomed = ViewState(zoom_rect(region, clip.height, clip.width), 0, clip.n_frames - 1)
            if seg_target(clip, region, zoomed) is not obj:
                continue
        candidates.append((obj, region))
    if not candidates:
        raise GenerationError(f"Query {qid}: нет подходящей цели для {kind}")
    obj, region = candidates[int(rng.integers(0, len(candidates)))]
    return Query(qid, kind, region, obj.id, truth_answer(clip, kind, obj))


def validate_query(clip: Clip, query: Query) -> None:
    if query.kind not in ("read_text", "attribute", "track", "temporal"):
        raise GenerationError(f"Query {query.query_id}: неизвестный тип {query.kind!r}")
    if query.kind == "temporal":
        if clip.n_frames < 2 or target_event(clip) is None:
            raise GenerationError(f"Query {query.query_id}: нет событий")
        return
    try:
        obj = clip.object_by_id(query.object_id)
    except KeyError:
        raise GenerationError(f"Query {query.query_id}: объект {query.object_id} отсутствует")
    if query.kind == "read_text" and not obj.text:
        raise GenerationError(f"Query {query.query_id}: у объекта нет текста")
    if truth_answer(clip, query.kind, obj) != query.answer:
        raise GenerationError(f"Query {query.query_id}: ответ не совпадает с разметкой")


def make_split(world: WorldConfig, n: int, seed: int, tag: str) -> List[Tuple[Clip, Query]]:
    """
    n пар (клип, запрос) с id вида '<tag>-<i>'. Тип запроса идёт по кругу,
    неотвечаемый для клипа тип заменяется следующим.
    """
    items: List[Tuple[Clip, Query]] = []
    kinds = list(world.query_kinds)
    i = 0
    while len(items) < n:
        if i > 10 * n + 100:
            raise GenerationError(f"Split {tag}: не удалось набрать {n} отвечаемых запросов")
        clip = generate_clip(world, derive_seed(seed, tag, i), clip_id=f"{tag}-{i}")
        rng = make_rng(seed, tag, i, "query")
        start = i % len(kinds)
        for kind in kinds[start:] + kinds[:start]:
            try:
                items.append((clip, make_query(clip, kind, rng, query_id=f"{tag}-{i}")))
                break
            except GenerationError:
                continue
        i += 1
    return items
