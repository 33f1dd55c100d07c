import logging
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from typing import Callable, Iterable, List, Sequence, TypeVar

__all__ = ["parallel_map", "chunked"]

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def chunked(items: Sequence[T], size: int) -> List[Sequence[T]]:
    return [items[i : i + size] for i in range(0, len(items), size)]


def parallel_map(
    func: Callable[[T], R],
    items: Iterable[T],
    threads: int = 1,
    executor: str = "process",
) -> List[R]:
    """Order-preserving map; runs inline when threads <= 1."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    pool_cls = ProcessPoolExecutor if executor == "process" else ThreadPoolExecutor
    workers = min(threads, len(items))
    logger.debug("Mapping %d tasks over %d %s workers", len(items), workers, executor)
    with pool_cls(max_workers=workers) as pool:
        return list(pool.map(func, items))
