"""Base encoders, multi-scale representation concatenation, PCA reduction.

The built-in pyramid encoder replaces neural encoders at desk scale: per-band
mean/std over a 3-level spatial pyramid (1x1, 2x2, 4x4 grids -> 21 cells),
then a seeded fixed random projection to the target width, then L2
normalization. Encodings are float32 at the API boundary so that tables
written to disk reproduce in-memory encodings bit-exactly.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Hashable, Mapping

import numpy as np

from ._util import derive_seed, philox
from .data_model import EmbeddingTable, RasterBundle, UnitRecord
from .errors import (
    MissingEmbedding,
    NoPairs,
    ScaleTagMismatch,
    UnknownUnitId,
)
from .imaging import FetchMode, ImagePatch, fetch

ENCODER_PYRAMID = "pyramid"
ENCODER_EXTERNAL = "external"
PYRAMID_LEVELS = (1, 2, 4)
PYRAMID_CELLS = sum(g * g for g in PYRAMID_LEVELS)


@dataclass(frozen=True)
class EncoderSpec:
    """Configuration of one per-scale encoder.

    kind "pyramid" uses dim and seed; kind "external" looks units up in
    `source`, whose scale_tag must match the patch size.
    """

    kind: str = ENCODER_PYRAMID
    dim: int = 512
    seed: int = 0
    source: EmbeddingTable | None = None

    def __post_init__(self) -> None:
        if self.kind not in (ENCODER_PYRAMID, ENCODER_EXTERNAL):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError(f"encoder dim must be >= 1, got {self.dim}")
        if self.kind == ENCODER_EXTERNAL and self.source is None:
            raise MissingEmbedding("external encoder requires a source table")

    @property
    def out_dim(self) -> int:
        return self.dim if self.kind == ENCODER_PYRAMID else self.source.dim


@dataclass(frozen=True)
class ConcatSpec:
    """Scales to concatenate (ascending), one encoder per scale, optional PCA."""

    scales: tuple[int, ...]
    encoders: tuple[EncoderSpec, ...]
    pca_dim: int | None = None

    def __post_init__(self) -> None:
        if len(self.scales) < 1:
            raise ValueError("ConcatSpec needs at least one scale")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"scales must be strictly increasing, got {self.scales}")
        if len(self.encoders) != len(self.scales):
            raise ValueError(
                f"need one encoder per scale: {len(self.encoders)} encoders, "
                f"{len(self.scales)} scales"
            )
        total = sum(e.out_dim for e in self.encoders)
        if self.pca_dim is not None and not (1 <= self.pca_dim < total):
            raise ValueError(f"pca_dim must be in [1, {total}), got {self.pca_dim}")


@dataclass(frozen=True)
class FetchContext:
    """Where patches come from: bundle, fetch mode, optional per-unit centers."""

    bundle: RasterBundle
    mode: FetchMode = FetchMode.STRICT
    centers: Mapping[str, tuple[float, float]] | None = None

    def center_for(self, unit: UnitRecord) -> tuple[float, float]:
        if self.centers is not None and unit.id in self.centers:
            return self.centers[unit.id]
        return unit.x


def pyramid_features(patch: ImagePatch) -> np.ndarray:
    """Raw pyramid features, float64, length 2 * PYRAMID_CELLS * bands.

    Order: level ascending, cell row-major, band ascending, (mean, std).
    Cells that are empty at tiny patch sizes contribute (0, 0).
    """
    s = patch.size
    out = np.empty(2 * PYRAMID_CELLS * patch.bands, dtype=np.float64)
    k = 0
    for g in PYRAMID_LEVELS:
        bounds = (np.arange(g + 1) * s) // g
        for r in range(g):
            for c in range(g):
                cell = patch.data[:, bounds[r]:bounds[r + 1], bounds[c]:bounds[c + 1]]
                if cell.size == 0:
                    out[k:k + 2 * patch.bands] = 0.0
                    k += 2 * patch.bands
                    continue
                for b in range(patch.bands):
                    out[k] = cell[b].mean()
                    out[k + 1] = cell[b].std()
                    k += 2
    return out


_PROJ_CACHE: dict[tuple[int, int, int, int], np.ndarray] = {}
_PROJ_LOCK = threading.Lock()


def _projection(seed: int, scale: int, n_features: int, dim: int) -> np.ndarray:
    """Fixed random +-1/sqrt(dim) projection keyed by (seed, scale)."""
    key = (seed, scale, n_features, dim)
    with _PROJ_LOCK:
        cached = _PROJ_CACHE.get(key)
    if cached is not None:
        return cached
    rng = philox(derive_seed(seed, "builtin-proj", scale))
    signs = rng.integers(0, 2, size=(n_features, dim)).astype(np.float64)
    proj = (2.0 * signs - 1.0) / math.sqrt(dim)
    with _PROJ_LOCK:
        _PROJ_CACHE.setdefault(key, proj)
    return proj


def encode(patch: ImagePatch, enc: EncoderSpec, unit_id: str | None = None) -> np.ndarray:
    """Encode one patch to a float32 vector of length enc.out_dim."""
    if enc.kind == ENCODER_EXTERNAL:
        table = enc.source
        if table.scale_tag is not None and table.scale_tag != patch.size:
            raise ScaleTagMismatch(
                f"table computed at scale {table.scale_tag}, patch has scale {patch.size}"
            )
        if unit_id is None:
            raise MissingEmbedding("external encoder needs the unit id to look up")
        try:
            return table.lookup([unit_id])[0]
        except UnknownUnitId as exc:
            raise MissingEmbedding(str(exc)) from exc
    raw = pyramid_features(patch)
    proj = _projection(enc.seed, patch.size, raw.shape[0], enc.dim)
    v = raw @ proj
    norm = np.linalg.norm(v)
    if norm > 0.0:
        v = v / norm
    return v.astype(np.float32)


def concat_representations(
    unit: UnitRecord, spec: ConcatSpec, ctx: FetchContext
) -> np.ndarray:
    """Ascending-scale concatenation of per-scale encodings, float32."""
    center = ctx.center_for(unit)
    blocks = []
    for s, enc in zip(spec.scales, spec.encoders):
        patch = fetch(ctx.bundle, center, s, mode=ctx.mode, displaced=center != unit.x)
        blocks.append(encode(patch, enc, unit_id=unit.id))
    return np.concatenate(blocks)


def encode_units(
    units: list[UnitRecord],
    scale: int,
    enc: EncoderSpec,
    ctx: FetchContext,
) -> EmbeddingTable:
    """Encode every unit at one scale into an EmbeddingTable tagged with it."""
    values = np.empty((len(units), enc.out_dim), dtype=np.float32)
    for i, unit in enumerate(units):
        center = ctx.center_for(unit)
        patch = fetch(ctx.bundle, center, scale, mode=ctx.mode, displaced=center != unit.x)
        values[i] = encode(patch, enc, unit_id=unit.id)
    return EmbeddingTable(
        unit_ids=tuple(u.id for u in units), dim=enc.out_dim,
        values=values, scale_tag=scale,
    )


@dataclass(frozen=True)
class PcaModel:
    """Centered principal directions. components rows are orthonormal."""

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    rank_deficient: bool = False

    def __post_init__(self) -> None:
        l = self.components.shape[0]
        gram = self.components @ self.components.T
        if np.abs(gram - np.eye(l)).max() > 1e-6:
            raise ValueError("PCA components are not orthonormal")
        ev = self.explained_variance
        if np.any(ev < -1e-12) or np.any(np.diff(ev) > 1e-9):
            raise ValueError("explained_variance must be non-negative and non-increasing")


def fit_pca(X: np.ndarray, l: int) -> PcaModel:
    """Top-l principal directions of centered X via SVD.

    Sign is fixed so each component's largest-magnitude entry is positive
    (first such entry on ties). If l exceeds the numerical rank, trailing
    explained variances are zeroed and rank_deficient is set.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise ValueError(f"PCA needs n >= 2, got {n}")
    if not 1 <= l <= min(n - 1, d):
        raise ValueError(f"PCA target dim must be in [1, {min(n - 1, d)}], got {l}")
    mean = X.mean(axis=0)
    _, svals, vt = np.linalg.svd(X - mean, full_matrices=False)
    tol = svals[0] * max(n, d) * np.finfo(np.float64).eps if svals[0] > 0 else 0.0
    rank = int(np.sum(svals > tol))
    components = vt[:l].copy()
    ev = svals[:l] ** 2 / (n - 1)
    if rank < l:
        ev[rank:] = 0.0
    for i in range(l):
        j = int(np.argmax(np.abs(components[i])))
        if components[i, j] < 0:
            components[i] = -components[i]
    return PcaModel(
        mean=mean, components=components, explained_variance=ev,
        rank_deficient=rank < l,
    )


def project(model: PcaModel, x: np.ndarray) -> np.ndarray:
    """components @ (x - mean); accepts a vector or a matrix of rows."""
    x = np.asarray(x, dtype=np.float64)
    return (x - model.mean) @ model.components.T


def mean_within_group_distance(
    table: EmbeddingTable, groups: Mapping[str, Hashable]
) -> float:
    """Mean Euclidean distance over all within-group unordered pairs."""
    members: dict[Hashable, list[int]] = {}
    for i, uid in enumerate(table.unit_ids):
        if uid in groups:
            members.setdefault(groups[uid], []).append(i)
    total = 0.0
    pairs = 0
    for rows in members.values():
        if len(rows) < 2:
            continue
        vals = table.values[rows].astype(np.float64)
        diffs = vals[:, None, :] - vals[None, :, :]
        dists = np.sqrt((diffs ** 2).sum(axis=2))
        iu = np.triu_indices(len(rows), k=1)
        total += float(dists[iu].sum())
        pairs += len(iu[0])
    if pairs == 0:
        raise NoPairs("no group has at least two members")
    return total / pairs
