from __future__ import annotations

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
    )


@contextmanager
def run_log(path: str | Path, logger_name: str = "nlf") -> Iterator[Path]:
    """Mirror ``logger_name`` records into ``path`` while the block runs.

    Used for ``train.log`` inside a run directory. The handler is detached on
    exit, also when training aborts.
    """

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="a", encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    target = logging.getLogger(logger_name)
    target.addHandler(handler)
    try:
        yield path
    finally:
        target.removeHandler(handler)
        handler.close()
