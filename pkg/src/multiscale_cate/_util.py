"""Seed derivation, counter-based RNG construction, hashing, deterministic parallel map."""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

_SEP = "\x1f"


def derive_seed(*parts: int | str) -> int:
    """Stable 63-bit seed from a tuple of ints and strings.

    Hash-based so that unrelated seed streams never collide by arithmetic
    accident; platform independent.
    """
    msg = _SEP.join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(msg).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def philox(*parts: int | str) -> np.random.Generator:
    """Counter-based generator keyed by derive_seed(*parts)."""
    return np.random.Generator(np.random.Philox(key=derive_seed(*parts)))


def pmap(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Order-preserving map, optionally on a thread pool.

    Results are a pure function of `items`: thread count affects wall time only.
    """
    seq = list(items)
    if threads <= 1 or len(seq) <= 1:
        return [fn(it) for it in seq]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, seq))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj: Any) -> str:
    """Key-sorted, whitespace-free JSON; floats via repr for exact round-trip."""

    def default(o: Any) -> Any:
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.floating,)):
            return float(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, tuple):
            return list(o)
        raise TypeError(f"not JSON-serializable: {type(o)!r}")

    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=default)


def format_float(v: float) -> str:
    """Shortest decimal string that parses back to the exact same float64."""
    return repr(float(v))


def format_float32(v: np.floating | float) -> str:
    """9 significant digits: parses back to the exact same float32."""
    return "%.9g" % float(v)


def stable_order(scores: np.ndarray, tiebreak: Sequence | np.ndarray) -> np.ndarray:
    """Indices sorting `scores` descending, ties broken ascending by `tiebreak`."""
    scores = np.asarray(scores, dtype=np.float64)
    tb = np.asarray(tiebreak)
    return np.lexsort((tb, -scores))
