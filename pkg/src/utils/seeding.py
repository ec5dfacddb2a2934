# src/utils/seeding.py

import zlib
from typing import Union

import numpy as np

Tag = Union[str, int]


def _tag_entropy(tag: Tag) -> int:
    if isinstance(tag, int):
        return tag & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(tag.encode("utf-8"))


def make_rng(seed: int, *tags: Tag) -> np.random.Generator:
    """
    Именованный поток случайности: один 64-битный seed из конфига
    плюс метки ("clip", 17, "rollout") дают независимый и воспроизводимый генератор.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_entropy(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *tags: Tag) -> int:
    """Производный 63-битный seed (его пишем в логи, чтобы повтор был побитовым)."""
    return int(make_rng(seed, *tags).integers(0, 2**63 - 1))
