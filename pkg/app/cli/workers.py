from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Generic, Sequence, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class CellOutcome(Generic[R]):
    """Result of one independent cell; exactly one of value / error is meaningful."""

    index: int
    value: R | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


class _ThreadFilter(logging.Filter):
    # プール内の他スレッドのログがセルのログファイルへ混ざらないようにする
    def __init__(self, thread_id: int) -> None:
        super().__init__()
        self._thread_id = thread_id

    def filter(self, record: logging.LogRecord) -> bool:
        return record.thread == self._thread_id


def parallel_map(
    func: Callable[[T], R],
    items: Sequence[T],
    threads: int = 1,
    log_dir: Path | None = None,
    offset: int = 0,
) -> list[CellOutcome[R]]:
    """
    Run func on every item on a bounded thread pool.

    Outcomes come back in input order; an exception in one cell is logged and
    recorded in its outcome without touching the others.
    """

    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [pool.submit(_run_cell, func, index, item, log_dir) for index, item in enumerate(items, start=offset)]
        return [future.result() for future in futures]


def _run_cell(func: Callable[[T], R], index: int, item: T, log_dir: Path | None) -> CellOutcome[R]:
    handler = _attach_cell_log(log_dir / f"{index}.log") if log_dir is not None else None
    try:
        value = func(item)
    except Exception as exc:  # noqa: BLE001 - one failing cell must not abort the pool
        logger.exception("cell %d failed", index)
        return CellOutcome(index=index, error=f"{type(exc).__name__}: {exc}")
    finally:
        if handler is not None:
            _detach_cell_log(handler)
    return CellOutcome(index=index, value=value)


def _attach_cell_log(path: Path) -> logging.Handler:
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    handler.addFilter(_ThreadFilter(threading.get_ident()))
    logging.getLogger().addHandler(handler)
    return handler


def _detach_cell_log(handler: logging.Handler) -> None:
    logging.getLogger().removeHandler(handler)
    handler.close()
