"""Patch fetching, center displacement, simulation perturbations, overlap diagnostic.

Window convention: for width s, the patch at coordinate x covers pixel columns
[floor(x_col) - s//2, floor(x_col) - s//2 + s - 1], and likewise rows. All
functions are pure; patches are never mutated in place.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from ._util import philox
from .data_model import RasterBundle
from .errors import MaskTooLarge, NoValidCenter, NonFiniteValue, OutOfBounds


class FetchMode(enum.Enum):
    STRICT = "strict"
    CLAMP = "clamp"


class PerturbationKind(enum.Enum):
    MASK = "mask"
    EDGE_FADE = "edge_fade"
    CONTRAST = "contrast"
    ROTATE90 = "rotate90"


@dataclass(frozen=True)
class ImagePatch:
    """A square multi-band crop. data has shape (bands, size, size), float64."""

    size: int
    bands: int
    data: np.ndarray
    center: tuple[float, float]
    displaced: bool = False
    shift: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        if self.size < 1:
            raise OutOfBounds(f"patch size must be >= 1, got {self.size}")
        if self.data.shape != (self.bands, self.size, self.size):
            raise OutOfBounds(
                f"patch data shape {self.data.shape} != ({self.bands}, {self.size}, {self.size})"
            )
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteValue("patch contains non-finite values")


@dataclass(frozen=True)
class Perturbation:
    """One of the four simulation perturbations with its parameters.

    fade_size None means the per-patch default 1/(s/2), i.e. the fade reaches 0
    at the patch boundary.
    """

    kind: PerturbationKind
    mask_size: int = 2
    fade_size: float | None = None
    contrast_c: float = 1.0

    def __post_init__(self) -> None:
        if self.mask_size < 1:
            raise MaskTooLarge(f"mask_size must be >= 1, got {self.mask_size}")
        if self.fade_size is not None and not self.fade_size > 0:
            raise ValueError(f"fade_size must be > 0, got {self.fade_size}")
        if not self.contrast_c > 0:
            raise ValueError(f"contrast_c must be > 0, got {self.contrast_c}")

    @classmethod
    def mask(cls, size: int = 2) -> "Perturbation":
        return cls(kind=PerturbationKind.MASK, mask_size=size)

    @classmethod
    def edge_fade(cls, fade_size: float | None = None) -> "Perturbation":
        return cls(kind=PerturbationKind.EDGE_FADE, fade_size=fade_size)

    @classmethod
    def contrast(cls, c: float) -> "Perturbation":
        return cls(kind=PerturbationKind.CONTRAST, contrast_c=c)

    @classmethod
    def rotate90(cls) -> "Perturbation":
        return cls(kind=PerturbationKind.ROTATE90)


def window_origin(x: tuple[float, float], s: int) -> tuple[int, int]:
    """(col0, row0) of the s-wide window at coordinate x = (column, row)."""
    return (math.floor(x[0]) - s // 2, math.floor(x[1]) - s // 2)


def fetch(
    bundle: RasterBundle,
    x: tuple[float, float],
    s: int,
    mode: FetchMode = FetchMode.STRICT,
    displaced: bool = False,
) -> ImagePatch:
    """Crop the s-by-s patch whose center pixel contains x.

    Strict raises OutOfBounds when the window exceeds the raster; Clamp shifts
    the window inward and records the shift.
    """
    if s < 1:
        raise OutOfBounds(f"patch size must be >= 1, got {s}")
    if not all(math.isfinite(v) for v in x):
        raise OutOfBounds(f"non-finite coordinate {x}")
    col0, row0 = window_origin(x, s)
    shift_c, shift_r = 0, 0
    if mode is FetchMode.STRICT:
        if col0 < 0 or row0 < 0 or col0 + s > bundle.width or row0 + s > bundle.height:
            raise OutOfBounds(
                f"window cols [{col0},{col0 + s}) rows [{row0},{row0 + s}) "
                f"exceeds raster {bundle.width}x{bundle.height}"
            )
    else:
        if s > bundle.width or s > bundle.height:
            raise OutOfBounds(f"patch size {s} exceeds raster {bundle.width}x{bundle.height}")
        new_c = min(max(col0, 0), bundle.width - s)
        new_r = min(max(row0, 0), bundle.height - s)
        shift_c, shift_r = new_c - col0, new_r - row0
        col0, row0 = new_c, new_r
    data = bundle.data[:, row0:row0 + s, col0:col0 + s].astype(np.float64)
    return ImagePatch(
        size=s, bands=bundle.bands, data=data,
        center=(float(x[0]), float(x[1])), displaced=displaced,
        shift=(shift_c, shift_r),
    )


def displace_center(
    x: tuple[float, float], rng_seed: int, bundle: RasterBundle, s_max: int
) -> tuple[float, float]:
    """Uniform draw over integer centers whose s_max window fits strictly.

    Column is drawn before row. The input coordinate is ignored except as the
    thing being replaced; the draw is deterministic in rng_seed alone.
    """
    del x
    n_c = bundle.width - s_max + 1
    n_r = bundle.height - s_max + 1
    if n_c < 1 or n_r < 1:
        raise NoValidCenter(
            f"no center hosts an {s_max}x{s_max} window in a {bundle.width}x{bundle.height} raster"
        )
    rng = philox(rng_seed)
    col = s_max // 2 + int(rng.integers(0, n_c))
    row = s_max // 2 + int(rng.integers(0, n_r))
    return (float(col), float(row))


def apply_perturbation(patch: ImagePatch, p: Perturbation) -> ImagePatch:
    """Return a perturbed copy of the patch; the input is not mutated."""
    s = patch.size
    data = patch.data.copy()
    if p.kind is PerturbationKind.MASK:
        k = p.mask_size
        if k > s:
            raise MaskTooLarge(f"mask_size {k} exceeds patch size {s}")
        start = s // 2 - k // 2
        data[:, start:start + k, start:start + k] = 0.0
    elif p.kind is PerturbationKind.EDGE_FADE:
        fade = p.fade_size if p.fade_size is not None else 1.0 / (s / 2.0)
        c = (s - 1) / 2.0
        rows = np.arange(s, dtype=np.float64) - c
        dist = np.sqrt(rows[:, None] ** 2 + rows[None, :] ** 2)
        factor = np.clip(1.0 - dist * fade, 0.0, 1.0)
        data = data * factor[None, :, :]
    elif p.kind is PerturbationKind.CONTRAST:
        band_means = data.mean(axis=(1, 2), keepdims=True)
        data = band_means + p.contrast_c * (data - band_means)
    elif p.kind is PerturbationKind.ROTATE90:
        data = np.ascontiguousarray(np.rot90(data, k=1, axes=(1, 2)))
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unknown perturbation kind {p.kind}")
    return replace(patch, data=data)


def overlap_fraction(x_a: tuple[float, float], x_b: tuple[float, float], s: int) -> float:
    """Intersection area of the two s-by-s windows divided by s^2."""
    if s < 1:
        raise ValueError(f"patch size must be >= 1, got {s}")
    ca, ra = window_origin(x_a, s)
    cb, rb = window_origin(x_b, s)
    oc = max(0, s - abs(ca - cb))
    orow = max(0, s - abs(ra - rb))
    return (oc * orow) / float(s * s)
