"""Small shared helpers: canonical JSON, hashing, bounded thread pools."""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence

_THREADS_ENV = "OSGATE_THREADS"


def canonical_json(obj) -> str:
    """Serialize with sorted keys and trailing newline; byte-stable for identical input."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def sha256_of_files(paths: Iterable[Path]) -> str:
    digest = hashlib.sha256()
    for path in sorted(Path(p) for p in paths):
        digest.update(path.name.encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()


def thread_count() -> int:
    """Parallelism cap, controlled by the OSGATE_THREADS environment variable."""
    raw = os.environ.get(_THREADS_ENV)
    if raw is not None:
        try:
            n = int(raw)
        except ValueError:
            n = 1
        return max(1, n)
    return max(1, min(4, os.cpu_count() or 1))


def parallel_map(fn: Callable, items: Sequence) -> list:
    """Map preserving order; uses a thread pool when more than one thread is allowed.

    Work items must be independent; results are collected in input order so the
    output is identical to the sequential path.
    """
    workers = min(thread_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
