"""Scale-search analyses over a grid of scale pairs.

grid_search evaluates every ordered pair (s1 <= s2) and every single scale
with the sample-split RATE Ratio pipeline, averaged over seeded replicates.
The multi-scale gain G is the best pair's mean ratio minus the best single
scale's mean ratio, exactly as recomputable from the emitted tables; se_G is
the SD of the per-replicate gains. Diagonal cells concatenate a scale with
itself; since the forest collapses duplicated columns and the pipeline seed
depends only on the set of distinct scales, diagonal cells reproduce their
single-scale runs exactly.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from ._util import derive_seed, philox, pmap
from .causal_forest import ForestConfig, fit, scale_fraction_top10, variable_importance
from .data_model import RasterBundle, UnitRecord
from .embedding import EncoderSpec, FetchContext
from .errors import NumericalError, RequiresRawRepresentations
from .hte_metrics import PipelineConfig, rate_ratio_pipeline
from .imaging import FetchMode, displace_center

REDUCTION_RAW = "raw"
REDUCTION_PCA = "pca"


@dataclass(frozen=True)
class ScaleGrid:
    """Scale set, reduction choice, and replication plan for the grid search."""

    scales: tuple[int, ...] = (16, 32, 64, 128, 256, 349)
    reduction: str = REDUCTION_RAW
    pca_dim: int = 50
    replicates: int = 10
    subset_budget: int = 20
    displaced: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.scales) < 1:
            raise ValueError("scale set must be non-empty")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"scales must be strictly increasing, got {self.scales}")
        if self.reduction not in (REDUCTION_RAW, REDUCTION_PCA):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.pca_dim < 1:
            raise ValueError(f"pca_dim must be >= 1, got {self.pca_dim}")
        if self.replicates < 1:
            raise ValueError(f"replicates must be >= 1, got {self.replicates}")
        if self.subset_budget < 1:
            raise ValueError(f"subset_budget must be >= 1, got {self.subset_budget}")


@dataclass(frozen=True)
class GainReport:
    scales: tuple[int, ...]
    reduction: str
    displaced: bool
    replicates: int
    heatmap: np.ndarray
    singles: np.ndarray
    best_multi: tuple[int, int, float]
    best_single: tuple[int, float]
    gain: float
    se_gain: float
    per_replicate_gain: tuple[float, ...]
    cell_ratios: Mapping[tuple[int, int], tuple[float, ...]]
    single_ratios: Mapping[int, tuple[float, ...]]


@dataclass(frozen=True)
class ScalingCurve:
    scales: tuple[int, ...]
    c_values: tuple[int, ...]
    mean_ratio: tuple[float, ...]
    per_subset: Mapping[int, tuple[tuple[tuple[int, ...], float], ...]]
    replicates: int
    subset_budget: int


@dataclass(frozen=True)
class DisplacedReport:
    displaced: GainReport
    reference: GainReport
    mean_ratio_displaced: float
    mean_ratio_reference: float
    delta: float


@dataclass(frozen=True)
class InterpretReport:
    scales: tuple[int, ...]
    replicates: int
    matrix: np.ndarray
    cell_fractions: Mapping[tuple[int, int], tuple[float, ...]]


EncoderLike = EncoderSpec | Mapping[int, EncoderSpec]


def _enc_for(enc: EncoderLike, scale: int) -> EncoderSpec:
    return enc[scale] if isinstance(enc, Mapping) else enc


def build_scale_embeddings(
    bundle: RasterBundle,
    units: Sequence[UnitRecord],
    scales: Sequence[int],
    enc: EncoderLike,
    fetch_mode: FetchMode = FetchMode.CLAMP,
    centers: Mapping[str, tuple[float, float]] | None = None,
) -> dict[int, np.ndarray]:
    """Per-scale float32 encoding matrices aligned with the unit order.

    enc is either one EncoderSpec used at every scale or a per-scale mapping
    (external encoders carry a different source table per scale).
    """
    from .embedding import encode_units

    ctx = FetchContext(bundle=bundle, mode=fetch_mode, centers=centers)
    return {s: encode_units(list(units), s, _enc_for(enc, s), ctx).values for s in scales}


def combo_features(
    embs: Mapping[int, np.ndarray], combo: tuple[int, ...], grid: ScaleGrid
) -> np.ndarray:
    X = np.concatenate([embs[s] for s in combo], axis=1)
    if grid.reduction == REDUCTION_PCA:
        from .embedding import fit_pca, project

        l = min(grid.pca_dim, X.shape[1])
        if l < X.shape[1]:
            return project(fit_pca(np.asarray(X, dtype=np.float64), l), X)
    return X


def _combo_seed(rep_seed: int, combo: tuple[int, ...]) -> int:
    uniq = tuple(dict.fromkeys(combo))
    return derive_seed(rep_seed, "scales", *uniq)


def _argmax_first(items: list[tuple], values: list[float]) -> tuple:
    """First item attaining the maximum value; nan values never win."""
    best = None
    best_v = -np.inf
    for item, v in zip(items, values):
        if np.isfinite(v) and v > best_v:
            best = item
            best_v = v
    if best is None:
        raise NumericalError("all grid cells produced undefined ratios")
    return best, best_v


def gain_from_tables(
    scales: Sequence[int],
    cell_means: Mapping[tuple[int, int], float],
    single_means: Mapping[int, float],
) -> tuple[tuple[int, int, float], tuple[int, float], float, np.ndarray, np.ndarray]:
    """Argmax cells and G from already-aggregated mean ratios.

    Returns (best_multi, best_single, gain, mirrored heatmap, singles vector).
    """
    scales = tuple(scales)
    pairs = [(s1, s2) for i, s1 in enumerate(scales) for s2 in scales[i:]]
    (bm, bm_v) = _argmax_first(pairs, [cell_means[p] for p in pairs])
    (bs, bs_v) = _argmax_first(list(scales), [single_means[s] for s in scales])
    heat = np.full((len(scales), len(scales)), np.nan)
    for i, s1 in enumerate(scales):
        for j, s2 in enumerate(scales):
            heat[i, j] = cell_means[(min(s1, s2), max(s1, s2))]
    singles = np.array([single_means[s] for s in scales], dtype=np.float64)
    return (bm[0], bm[1], bm_v), (bs, bs_v), bm_v - bs_v, heat, singles


def grid_search(
    units: Sequence[UnitRecord],
    bundle: RasterBundle,
    grid: ScaleGrid,
    enc: EncoderLike | None = None,
    pipeline: PipelineConfig | None = None,
    fetch_mode: FetchMode = FetchMode.CLAMP,
    centers: Mapping[str, tuple[float, float]] | None = None,
    threads: int = 1,
) -> GainReport:
    """Mean RATE Ratio per scale pair and per single scale, plus the gain G."""
    enc = enc if enc is not None else EncoderSpec()
    pipeline = pipeline if pipeline is not None else PipelineConfig()
    if grid.displaced and centers is None:
        centers = displaced_centers(units, bundle, grid)
    embs = build_scale_embeddings(bundle, units, grid.scales, enc, fetch_mode, centers)
    scales = grid.scales
    combos: list[tuple[int, ...]] = [
        (s1, s2) for i, s1 in enumerate(scales) for s2 in scales[i:]
    ]
    combos += [(s,) for s in scales]
    features = {c: combo_features(embs, c, grid) for c in combos}
    units = list(units)
    jobs = [(c, r) for c in combos for r in range(grid.replicates)]

    def run(job: tuple[tuple[int, ...], int]) -> float:
        combo, r = job
        seed = _combo_seed(derive_seed(grid.seed, "rep", r), combo)
        cfg = replace(pipeline, seed=seed)
        return rate_ratio_pipeline(units, features[combo], cfg).ratio

    values = pmap(run, jobs, threads=threads)
    ratios: dict[tuple[int, ...], list[float]] = {c: [] for c in combos}
    for (combo, _), v in zip(jobs, values):
        ratios[combo].append(v)
    cell_means = {
        c: float(np.mean(ratios[c])) for c in combos if len(c) == 2
    }
    single_means = {c[0]: float(np.mean(ratios[c])) for c in combos if len(c) == 1}
    best_multi, best_single, gain, heat, singles = gain_from_tables(
        scales, cell_means, single_means
    )
    per_rep = []
    for r in range(grid.replicates):
        _, mv = _argmax_first(
            [c for c in combos if len(c) == 2],
            [ratios[c][r] for c in combos if len(c) == 2],
        )
        _, sv = _argmax_first(
            [c for c in combos if len(c) == 1],
            [ratios[c][r] for c in combos if len(c) == 1],
        )
        per_rep.append(mv - sv)
    se_gain = float(np.std(per_rep, ddof=1)) if grid.replicates > 1 else float("nan")
    return GainReport(
        scales=scales, reduction=grid.reduction, displaced=grid.displaced,
        replicates=grid.replicates, heatmap=heat, singles=singles,
        best_multi=best_multi, best_single=best_single, gain=gain,
        se_gain=se_gain, per_replicate_gain=tuple(per_rep),
        cell_ratios={c: tuple(ratios[c]) for c in combos if len(c) == 2},
        single_ratios={c[0]: tuple(ratios[c]) for c in combos if len(c) == 1},
    )


def displaced_centers(
    units: Sequence[UnitRecord], bundle: RasterBundle, grid: ScaleGrid
) -> dict[str, tuple[float, float]]:
    """One displaced center per unit, reused across all scales and cells."""
    s_max = max(grid.scales)
    return {
        u.id: displace_center(u.x, derive_seed(grid.seed, "displace", u.id), bundle, s_max)
        for u in units
    }


def scaling_scales(
    units: Sequence[UnitRecord],
    bundle: RasterBundle,
    grid: ScaleGrid,
    max_c: int,
    enc: EncoderLike | None = None,
    pipeline: PipelineConfig | None = None,
    fetch_mode: FetchMode = FetchMode.CLAMP,
    threads: int = 1,
) -> ScalingCurve:
    """Mean RATE Ratio as a function of how many scales are concatenated."""
    if not 1 <= max_c <= len(grid.scales):
        raise ValueError(f"max_c must be in [1, {len(grid.scales)}], got {max_c}")
    enc = enc if enc is not None else EncoderSpec()
    pipeline = pipeline if pipeline is not None else PipelineConfig()
    embs = build_scale_embeddings(bundle, units, grid.scales, enc, fetch_mode)
    units = list(units)
    mean_ratio = []
    per_subset: dict[int, tuple] = {}
    for c in range(1, max_c + 1):
        subsets = list(itertools.combinations(grid.scales, c))
        if len(subsets) > grid.subset_budget:
            pick = np.sort(
                philox(derive_seed(grid.seed, "subsets", c)).permutation(len(subsets))[
                    : grid.subset_budget
                ]
            )
            subsets = [subsets[i] for i in pick]
        features = {s: combo_features(embs, s, grid) for s in subsets}
        jobs = [(s, r) for s in subsets for r in range(grid.replicates)]

        def run(job: tuple[tuple[int, ...], int]) -> float:
            subset, r = job
            seed = _combo_seed(derive_seed(grid.seed, "rep", r), subset)
            return rate_ratio_pipeline(
                units, features[subset], replace(pipeline, seed=seed)
            ).ratio

        values = pmap(run, jobs, threads=threads)
        by_subset: dict[tuple[int, ...], list[float]] = {s: [] for s in subsets}
        for (subset, _), v in zip(jobs, values):
            by_subset[subset].append(v)
        mean_ratio.append(float(np.mean(values)))
        per_subset[c] = tuple(
            (s, float(np.mean(by_subset[s]))) for s in subsets
        )
    return ScalingCurve(
        scales=grid.scales, c_values=tuple(range(1, max_c + 1)),
        mean_ratio=tuple(mean_ratio), per_subset=per_subset,
        replicates=grid.replicates, subset_budget=grid.subset_budget,
    )


def _report_mean_ratio(report: GainReport) -> float:
    cells = [np.mean(v) for v in report.cell_ratios.values()]
    cells += [np.mean(v) for v in report.single_ratios.values()]
    return float(np.mean(cells))


def displaced_analysis(
    units: Sequence[UnitRecord],
    bundle: RasterBundle,
    grid: ScaleGrid,
    enc: EncoderLike | None = None,
    pipeline: PipelineConfig | None = None,
    fetch_mode: FetchMode = FetchMode.CLAMP,
    threads: int = 1,
) -> DisplacedReport:
    """Grid search with displaced centers, paired against the anchored run."""
    centers = displaced_centers(units, bundle, grid)
    disp = grid_search(
        units, bundle, replace(grid, displaced=True), enc, pipeline,
        fetch_mode, centers=centers, threads=threads,
    )
    ref = grid_search(
        units, bundle, replace(grid, displaced=False), enc, pipeline,
        fetch_mode, centers=None, threads=threads,
    )
    md, mr = _report_mean_ratio(disp), _report_mean_ratio(ref)
    return DisplacedReport(
        displaced=disp, reference=ref,
        mean_ratio_displaced=md, mean_ratio_reference=mr, delta=md - mr,
    )


def interpretability_heatmap(
    units: Sequence[UnitRecord],
    bundle: RasterBundle,
    grid: ScaleGrid,
    enc: EncoderLike | None = None,
    forest: ForestConfig | None = None,
    fetch_mode: FetchMode = FetchMode.CLAMP,
    threads: int = 1,
) -> InterpretReport:
    """Fraction of top-10 features from the smaller scale, per grid cell.

    Needs raw (unreduced) representations for block attribution. On diagonal
    cells duplicated columns credit the first block, so the fraction is 1.
    """
    if grid.reduction != REDUCTION_RAW:
        raise RequiresRawRepresentations(
            "interpretability needs raw representations; disable PCA reduction"
        )
    enc = enc if enc is not None else EncoderSpec()
    forest = forest if forest is not None else ForestConfig()
    embs = build_scale_embeddings(bundle, units, grid.scales, enc, fetch_mode)
    units = list(units)
    w = np.array([u.w for u in units], dtype=np.int64)
    y = np.array([u.y for u in units], dtype=np.float64)
    scales = grid.scales
    combos = [(s1, s2) for i, s1 in enumerate(scales) for s2 in scales[i:]]
    features = {c: np.concatenate([embs[s] for s in c], axis=1) for c in combos}
    blocks = {
        c: [(0, embs[c[0]].shape[1]),
            (embs[c[0]].shape[1], embs[c[0]].shape[1] + embs[c[1]].shape[1])]
        for c in combos
    }
    jobs = [(c, r) for c in combos for r in range(grid.replicates)]

    def run(job: tuple[tuple[int, int], int]) -> float:
        combo, r = job
        seed = derive_seed(derive_seed(grid.seed, "rep", r), "interp", *dict.fromkeys(combo))
        model = fit(features[combo], w, y, replace(forest, seed=seed))
        return scale_fraction_top10(variable_importance(model), blocks[combo])

    values = pmap(run, jobs, threads=threads)
    fractions: dict[tuple[int, int], list[float]] = {c: [] for c in combos}
    for (combo, _), v in zip(jobs, values):
        fractions[combo].append(v)
    matrix = np.full((len(scales), len(scales)), np.nan)
    for i, s1 in enumerate(scales):
        for j, s2 in enumerate(scales):
            key = (min(s1, s2), max(s1, s2))
            matrix[i, j] = float(np.mean(fractions[key]))
    return InterpretReport(
        scales=scales, replicates=grid.replicates, matrix=matrix,
        cell_fractions={c: tuple(v) for c, v in fractions.items()},
    )
