"""Shared numeric and IO helpers."""

from __future__ import annotations

import json
import os
import tempfile
from typing import Any

import numpy as np


class LadcalibError(Exception):
    """Base class for data and invariant errors raised by this package."""


def logsumexp(x: np.ndarray) -> float:
    """Numerically stable log(sum(exp(x))) with max subtraction."""
    m = float(np.max(x))
    if not np.isfinite(m):
        raise LadcalibError(f"non-finite logits in logsumexp: max={m}")
    return m + float(np.log(np.sum(np.exp(x - m))))


def softmax(x: np.ndarray) -> np.ndarray:
    """Stable softmax over a 1-D array."""
    z = np.exp(x - np.max(x))
    return z / z.sum()


def canonical_json(obj: Any, indent: int | None = None) -> str:
    """Serialize with stable key order and shortest round-trip floats.

    Callers build dicts in the field order they want on disk; floats go
    through Python repr, which re-parses to the identical value, so a
    write/read/write cycle is byte-stable.
    """
    if indent is None:
        return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)
    return json.dumps(obj, ensure_ascii=False, indent=indent, allow_nan=False)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write a file atomically (temp file in the same dir, then rename)."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
