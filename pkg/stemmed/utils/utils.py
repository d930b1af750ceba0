import argparse
import logging
import os
import random
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

import numpy as np
import torch

T = TypeVar("T")
R = TypeVar("R")

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"

TRUE_WORDS = frozenset({"yes", "true", "t", "y", "1", "on"})
FALSE_WORDS = frozenset({"no", "false", "f", "n", "0", "off"})


def set_logger(level=logging.INFO):
    """Root handler for the command line; library modules only call getLogger."""
    logging.basicConfig(format=LOG_FORMAT, datefmt="%H:%M:%S", level=level)


def log_level(name) -> int:
    """argparse type for --log-level: a level name such as ``warning`` or a number."""
    if isinstance(name, int):
        return name
    text = str(name).strip()
    if text.isdigit():
        return int(text)
    value = logging.getLevelName(text.upper())
    if isinstance(value, int):
        return value
    raise argparse.ArgumentTypeError(f"unknown log level {name!r}")


def set_seed(seed):
    """Seeds numpy's legacy global state, ``random`` and torch."""
    np.random.seed(seed % 2**32)
    random.seed(seed)
    torch.manual_seed(seed)


def spawn_seeds(seed: int, n: int) -> List[int]:
    """Independent child seeds for ``n`` workers, derived from one master seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(child.generate_state(1, dtype=np.uint64)[0]) for child in children]


def derive_seed(seed: int, *keys: int) -> int:
    return int(
        np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint64)[0]
    )


def default_workers() -> int:
    return os.cpu_count() or 1


def parallel_map(
    fn: Callable[[T], R], items: Iterable[T], workers: Optional[int] = 1
) -> List[R]:
    """Order-preserving map over a thread pool; ``workers=1`` runs inline."""
    items = list(items)
    if workers is None:
        workers = default_workers()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def str2bool(value) -> bool:
    if isinstance(value, bool):
        return value
    word = str(value).strip().lower()
    if word in TRUE_WORDS:
        return True
    if word in FALSE_WORDS:
        return False
    raise argparse.ArgumentTypeError(f"expected yes/no, got {value!r}")
