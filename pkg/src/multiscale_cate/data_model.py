"""On-disk formats and in-memory containers for rasters, unit tables, embeddings.

Formats (all byte-deterministic on write):

- raster: raw little-endian float32 payload at <path>, band planes concatenated,
  each plane row-major; JSON sidecar header at <path>.json with width, height,
  bands, pixel_size_m, dtype, origin.
- units: UTF-8 CSV with header ``id,x,y,w,outcome``. x is the column and y the
  row coordinate of the unit location in pixel units of the raster frame.
- embeddings: UTF-8 CSV with header ``id,f0,...,f{dim-1}``; an optional leading
  ``# scale_tag=<int>`` comment line carries the patch scale the vectors were
  computed at. Values are float32 written with 9 significant digits, so parsing
  returns the exact stored value.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from ._util import format_float, format_float32
from .errors import (
    DimMismatch,
    DuplicateId,
    MalformedHeader,
    NonBinaryTreatment,
    NonFiniteValue,
    SizeMismatch,
    UnknownUnitId,
    UnparsableRow,
)

RASTER_DTYPE = "f32"


@dataclass(frozen=True)
class RasterBundle:
    """A multi-band image plus its georeferencing stub.

    data has shape (bands, height, width), float32. Treated as immutable.
    """

    width: int
    height: int
    bands: int
    pixel_size_m: float
    data: np.ndarray
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1 or self.bands < 1:
            raise MalformedHeader(
                f"raster dimensions must be positive, got "
                f"{self.bands}x{self.height}x{self.width}"
            )
        if not (math.isfinite(self.pixel_size_m) and self.pixel_size_m > 0):
            raise MalformedHeader(f"pixel_size_m must be finite positive, got {self.pixel_size_m}")
        expected = (self.bands, self.height, self.width)
        if self.data.shape != expected:
            raise SizeMismatch(f"raster data shape {self.data.shape} != header {expected}")
        if self.data.dtype != np.float32:
            raise SizeMismatch(f"raster dtype {self.data.dtype} != float32")
        if not np.all(np.isfinite(self.data)):
            offset = int(np.flatnonzero(~np.isfinite(self.data.ravel()))[0])
            raise NonFiniteValue(f"raster has non-finite value at flat offset {offset}")


def save_raster(bundle: RasterBundle, path: str) -> None:
    header = {
        "width": bundle.width,
        "height": bundle.height,
        "bands": bundle.bands,
        "pixel_size_m": bundle.pixel_size_m,
        "dtype": RASTER_DTYPE,
        "origin": list(bundle.origin),
    }
    payload = np.ascontiguousarray(bundle.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(payload)
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(header, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_raster(path: str) -> RasterBundle:
    header_path = path + ".json"
    if not os.path.exists(header_path):
        raise MalformedHeader(f"missing raster header {header_path}")
    with open(header_path, "r", encoding="utf-8") as fh:
        try:
            header = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MalformedHeader(f"raster header {header_path} is not valid JSON: {exc}") from exc
    for key in ("width", "height", "bands", "pixel_size_m", "dtype"):
        if key not in header:
            raise MalformedHeader(f"raster header missing field '{key}'")
    if header["dtype"] != RASTER_DTYPE:
        raise MalformedHeader(f"raster header field 'dtype' must be '{RASTER_DTYPE}', got {header['dtype']!r}")
    try:
        width = int(header["width"])
        height = int(header["height"])
        bands = int(header["bands"])
        pixel_size_m = float(header["pixel_size_m"])
        origin = tuple(float(v) for v in header.get("origin", (0.0, 0.0)))
    except (TypeError, ValueError) as exc:
        raise MalformedHeader(f"raster header has a non-numeric field: {exc}") from exc
    if len(origin) != 2:
        raise MalformedHeader(f"raster header field 'origin' must have 2 entries, got {len(origin)}")
    with open(path, "rb") as fh:
        payload = fh.read()
    expected = width * height * bands
    if len(payload) != expected * 4:
        raise SizeMismatch(
            f"raster payload holds {len(payload) // 4} float32 values, "
            f"header declares {expected} ({bands}x{height}x{width})"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(bands, height, width).copy()
    return RasterBundle(
        width=width, height=height, bands=bands,
        pixel_size_m=pixel_size_m, data=data, origin=origin,
    )


@dataclass(frozen=True)
class UnitRecord:
    """One experimental unit: location in pixel coordinates, arm, outcome."""

    id: str
    x: tuple[float, float]
    w: int
    y: float

    def __post_init__(self) -> None:
        if self.w not in (0, 1):
            raise NonBinaryTreatment(f"unit {self.id!r}: w must be 0 or 1, got {self.w}")
        if not all(math.isfinite(v) for v in self.x):
            raise NonFiniteValue(f"unit {self.id!r}: non-finite location {self.x}")
        if not math.isfinite(self.y):
            raise NonFiniteValue(f"unit {self.id!r}: non-finite outcome {self.y}")


UNITS_HEADER = ("id", "x", "y", "w", "outcome")


def save_units(units: list[UnitRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(UNITS_HEADER)
        for u in units:
            writer.writerow([u.id, format_float(u.x[0]), format_float(u.x[1]), u.w, format_float(u.y)])


def load_units(path: str) -> list[UnitRecord]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != UNITS_HEADER:
        got = tuple(rows[0]) if rows else ()
        raise UnparsableRow(f"units header must be {','.join(UNITS_HEADER)}, got {','.join(got)}")
    units: list[UnitRecord] = []
    seen: set[str] = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 5:
            raise UnparsableRow(f"units row {lineno}: expected 5 fields, got {len(row)}")
        uid = row[0]
        if uid in seen:
            raise DuplicateId(f"units row {lineno}: duplicate id {uid!r}")
        seen.add(uid)
        try:
            x = float(row[1])
            y = float(row[2])
            outcome = float(row[4])
        except ValueError as exc:
            raise UnparsableRow(f"units row {lineno} (id {uid!r}): {exc}") from exc
        if row[3] not in ("0", "1"):
            raise NonBinaryTreatment(f"units row {lineno} (id {uid!r}): w must be 0 or 1, got {row[3]!r}")
        if not all(math.isfinite(v) for v in (x, y, outcome)):
            raise UnparsableRow(f"units row {lineno} (id {uid!r}): non-finite value")
        units.append(UnitRecord(id=uid, x=(x, y), w=int(row[3]), y=outcome))
    return units


@dataclass(frozen=True)
class EmbeddingTable:
    """Per-unit feature vectors at one scale. values is (n, dim) float32."""

    unit_ids: tuple[str, ...]
    dim: int
    values: np.ndarray
    scale_tag: int | None = None
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.values.shape != (len(self.unit_ids), self.dim):
            raise DimMismatch(
                f"embedding values shape {self.values.shape} != ({len(self.unit_ids)}, {self.dim})"
            )
        if self.values.dtype != np.float32:
            raise DimMismatch(f"embedding dtype {self.values.dtype} != float32")
        if not np.all(np.isfinite(self.values)):
            row = int(np.flatnonzero(~np.isfinite(self.values).all(axis=1))[0])
            raise NonFiniteValue(f"embedding row for unit {self.unit_ids[row]!r} has non-finite values")
        index: dict[str, int] = {}
        for i, uid in enumerate(self.unit_ids):
            if uid in index:
                raise DuplicateId(f"embedding table: duplicate unit id {uid!r}")
            index[uid] = i
        object.__setattr__(self, "_index", index)

    def lookup(self, unit_ids: list[str] | tuple[str, ...]) -> np.ndarray:
        """Rows for the given ids, in the given order."""
        rows = np.empty(len(unit_ids), dtype=np.int64)
        for i, uid in enumerate(unit_ids):
            if uid not in self._index:
                raise UnknownUnitId(f"no embedding for unit {uid!r}")
            rows[i] = self._index[uid]
        return self.values[rows]


def save_embeddings(table: EmbeddingTable, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if table.scale_tag is not None:
            fh.write(f"# scale_tag={table.scale_tag}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id"] + [f"f{j}" for j in range(table.dim)])
        for i, uid in enumerate(table.unit_ids):
            writer.writerow([uid] + [format_float32(v) for v in table.values[i]])


def load_embeddings(path: str) -> EmbeddingTable:
    scale_tag: int | None = None
    with open(path, "r", encoding="utf-8", newline="") as fh:
        first = fh.readline()
        if first.startswith("# scale_tag="):
            try:
                scale_tag = int(first.strip().split("=", 1)[1])
            except ValueError as exc:
                raise MalformedHeader(f"bad scale_tag line {first.strip()!r}") from exc
            rows = list(csv.reader(fh))
        elif first:
            rows = list(csv.reader([first])) + list(csv.reader(fh))
        else:
            rows = []
    if not rows or not rows[0] or rows[0][0] != "id":
        raise MalformedHeader(f"embeddings header must start with 'id', got {rows[0] if rows else ()}")
    dim = len(rows[0]) - 1
    if dim < 1 or rows[0][1:] != [f"f{j}" for j in range(dim)]:
        raise MalformedHeader("embeddings header columns must be id,f0,...,f{dim-1}")
    ids: list[str] = []
    values = np.empty((len(rows) - 1, dim), dtype=np.float32)
    k = 0
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != dim + 1:
            raise DimMismatch(f"embeddings row {lineno}: expected {dim + 1} fields, got {len(row)}")
        try:
            values[k] = np.array([np.float32(v) for v in row[1:]], dtype=np.float32)
        except ValueError as exc:
            raise UnparsableRow(f"embeddings row {lineno} (id {row[0]!r}): {exc}") from exc
        ids.append(row[0])
        k += 1
    return EmbeddingTable(unit_ids=tuple(ids), dim=dim, values=values[:k], scale_tag=scale_tag)
