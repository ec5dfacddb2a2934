# src/index/ivfpq.py

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set

import faiss
import numpy as np

from config import IndexConfig
from index.keys import HybridKey
from utils.errors import ConfigError, ProtocolError
from utils.logger import get_logger

logger = get_logger("pixelsoul-index")

MAGIC = b"PXSIVFPQ"
FORMAT_VERSION = 1
HEADER = struct.Struct("<IIIIII")


@dataclass
class Neighbor:
    id: str
    score: float


class IvfPqIndex:
    """
    Гибридный индекс: грубый квантователь IVF + PQ-коды (faiss) и точный
    перескоринг по исходным ключам. Белый список абсолютен: такие id не хранятся.
    """

    def __init__(self, cfg: IndexConfig):
        if (cfg.text_dim + cfg.pixel_dim) % cfg.m != 0:
            raise ConfigError(f"размер ключа {cfg.text_dim + cfg.pixel_dim} не делится на m={cfg.m}", field="index.m")
        self.cfg = cfg
        self.dim = cfg.text_dim + cfg.pixel_dim
        self.ids: List[str] = []
        self._pos: Dict[str, int] = {}
        self._vectors = np.zeros((0, self.dim), dtype=np.float32)
        self._alive = np.zeros(0, dtype=bool)
        self.whitelist: Set[str] = set()
        self.blocklist: Set[str] = set()
        self._ivf: Optional[faiss.Index] = None

    # ---- РАЗМЕР ----

    def __len__(self) -> int:
        return int(self._alive.sum())

    def __contains__(self, item_id: str) -> bool:
        pos = self._pos.get(item_id)
        return pos is not None and bool(self._alive[pos])

    @property
    def trained(self) -> bool:
        return self._ivf is not None

    def stored_ids(self) -> List[str]:
        return [i for i, alive in zip(self.ids, self._alive) if alive]

    def vector(self, item_id: str) -> np.ndarray:
        return self._vectors[self._pos[item_id]]

    # ---- ЗАПИСЬ ----

    def _admissible(self, item_id: str) -> bool:
        if item_id in self.whitelist or item_id in self.blocklist or item_id in self._pos:
            logger.debug(f"Index: rejected add of {item_id}")
            return False
        return True

    def _append(self, keys: Iterable[HybridKey]) -> int:
        fresh: List[HybridKey] = []
        for key in keys:
            if self._admissible(key.source_id):
                self._pos[key.source_id] = len(self.ids)
                self.ids.append(key.source_id)
                fresh.append(key)
        if not fresh:
            return 0
        start = len(self._vectors)
        vecs = np.stack([np.asarray(k.vector, dtype=np.float32) for k in fresh])
        self._vectors = np.vstack([self._vectors, vecs])
        self._alive = np.concatenate([self._alive, np.ones(len(fresh), dtype=bool)])
        if self._ivf is not None:
            self._ivf.add_with_ids(vecs, np.arange(start, start + len(fresh), dtype=np.int64))
        return len(fresh)

    def add_many(self, keys: Iterable[HybridKey]) -> int:
        """
        Один писатель. Белый/чёрный список и повторный id → отказ (ранний ingest побеждает).
        Необученный индекс, дошедший до min_train живых ключей, обучается один раз здесь же.
        """
        added = self._append(keys)
        if added and self._ivf is None and len(self) >= self.cfg.min_train:
            logger.info(f"Index: reached {len(self)} keys, training IVF-PQ")
            self._train()
        return added

    def add(self, key: HybridKey) -> bool:
        return self.add_many([key]) == 1

    def build(self, keys: Sequence[HybridKey] = ()) -> "IvfPqIndex":
        """Добавляет ключи и обучает IVF-PQ на всех живых векторах; меньше min_train — точный поиск."""
        self._append(keys)
        n = len(self)
        if n < self.cfg.min_train:
            logger.info(f"Index: {n} keys, below {self.cfg.min_train}, using exact search")
            self._ivf = None
            self.assert_whitelist()
            return self
        self._train()
        self.assert_whitelist()
        return self

    def _train(self) -> None:
        alive = np.flatnonzero(self._alive)
        n = len(alive)
        n_list = max(1, min(self.cfg.n_list, n // 8))
        bits = max(1, min(self.cfg.bits, int(np.log2(n))))
        quantizer = faiss.IndexFlatIP(self.dim)
        ivf = faiss.IndexIVFPQ(quantizer, self.dim, n_list, self.cfg.m, bits, faiss.METRIC_INNER_PRODUCT)
        ivf.cp.niter = self.cfg.kmeans_iters
        ivf.cp.seed = self.cfg.encoder_seed
        ivf.pq.cp.niter = self.cfg.kmeans_iters
        ivf.pq.cp.seed = self.cfg.encoder_seed
        data = np.ascontiguousarray(self._vectors[alive])
        ivf.train(data)
        ivf.set_direct_map_type(faiss.DirectMap.Hashtable)
        ivf.add_with_ids(data, alive.astype(np.int64))
        self._ivf = ivf
        logger.info(f"Index: trained IVF-PQ n={n} n_list={n_list} m={self.cfg.m} bits={bits}")

    def install_whitelist(self, ids: Iterable[str]) -> int:
        """Новые id белого списка удаляются из индекса и больше не принимаются."""
        ids = set(ids)
        self.whitelist |= ids
        removed = [self._pos[i] for i in ids if i in self]
        for pos in removed:
            self._alive[pos] = False
        if removed and self._ivf is not None:
            self._ivf.remove_ids(np.asarray(removed, dtype=np.int64))
        if removed:
            logger.info(f"Index: whitelist removed {len(removed)} stored ids")
        self.assert_whitelist()
        return len(removed)

    def block(self, item_id: str) -> None:
        self.blocklist.add(item_id)

    def assert_whitelist(self) -> None:
        leaked = self.whitelist.intersection(self.stored_ids())
        if leaked:
            raise ProtocolError(f"Index: whitelisted ids stored: {sorted(leaked)[:5]}")

    # ---- ПОИСК ----

    def search(self, query: HybridKey, lam_pix: float, k: int, n_probe: Optional[int] = None) -> List[Neighbor]:
        """
        Кандидаты по приближённому смешанному сходству (1−λ)·sim_txt + λ·sim_pix,
        затем точный перескоринг и top-k.
        """
        if not 0.0 <= lam_pix <= 1.0:
            raise ValueError(f"Index: λ_pix вне [0,1]: {lam_pix}")
        n = len(self)
        if n == 0:
            raise ValueError("Index: поиск по пустому индексу")
        if k > n:
            logger.info(f"Index: k={k} > size {n}, returning all")
            k = n
        q = np.ascontiguousarray(query.weighted(lam_pix), dtype=np.float32)

        if self._ivf is not None:
            self._ivf.nprobe = n_probe or self.cfg.n_probe
            pool = min(max(self.cfg.rerank, k), self._ivf.ntotal)
            _, found = self._ivf.search(q[None, :], pool)
            candidates = found[0][found[0] >= 0]
        else:
            candidates = np.flatnonzero(self._alive)

        candidates = candidates[self._alive[candidates]]
        exact = self._vectors[candidates] @ q
        order = np.lexsort((candidates, -exact))[:k]
        out = [Neighbor(self.ids[candidates[i]], float(exact[i])) for i in order]
        if any(nb.id in self.whitelist for nb in out):
            raise ProtocolError("Index: whitelisted id in search result")
        return out

    def decoded(self, item_id: str) -> np.ndarray:
        """Вектор, восстановленный из PQ-кода (для проверки ошибки квантования)."""
        if self._ivf is None:
            return self.vector(item_id).copy()
        return self._ivf.reconstruct(self._pos[item_id])

    # ---- ФАЙЛ ----

    def save(self, path: Path) -> Path:
        """Один версионный бинарный файл: magic, заголовок, затем массивы подряд."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = faiss.serialize_index(self._ivf) if self._ivf is not None else np.zeros(0, dtype=np.uint8)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(HEADER.pack(FORMAT_VERSION, self.cfg.text_dim, self.cfg.pixel_dim,
                                self.cfg.n_list, self.cfg.m, self.cfg.bits))
            for arr in (
                self._vectors,
                self._alive,
                np.asarray(self.ids, dtype=str),
                np.asarray(sorted(self.whitelist), dtype=str),
                np.asarray(sorted(self.blocklist), dtype=str),
                blob,
            ):
                np.save(f, arr, allow_pickle=False)
        return path

    @staticmethod
    def load(path: Path, cfg: Optional[IndexConfig] = None) -> "IvfPqIndex":
        with open(path, "rb") as f:
            if f.read(len(MAGIC)) != MAGIC:
                raise ValueError(f"Index: {path} не файл индекса")
            version, text_dim, pixel_dim, n_list, m, bits = HEADER.unpack(f.read(HEADER.size))
            if version != FORMAT_VERSION:
                raise ValueError(f"Index: версия файла {version}, ожидается {FORMAT_VERSION}")
            vectors, alive, ids, white, block, blob = (np.load(f, allow_pickle=False) for _ in range(6))
        base = dataclasses.replace(cfg or IndexConfig(), text_dim=text_dim, pixel_dim=pixel_dim,
                                   n_list=n_list, m=m, bits=bits)
        index = IvfPqIndex(base)
        index.ids = [str(i) for i in ids]
        index._pos = {i: p for p, i in enumerate(index.ids)}
        index._vectors = vectors.astype(np.float32)
        index._alive = alive.astype(bool)
        index.whitelist = {str(i) for i in white}
        index.blocklist = {str(i) for i in block}
        index._ivf = faiss.deserialize_index(blob) if blob.size else None
        if index._ivf is not None:
            index._ivf.set_direct_map_type(faiss.DirectMap.Hashtable)
        return index
