"""Synthetic perturbation studies.

Perturbations are assigned independently per unit with probability 1/2 each;
outcomes follow the distribution table
    unperturbed          N(0, 0^2)
    masked only          N(100, 100^2)
    edge-faded only      N(-100, 100^2)
    masked + edge-faded  N(0, 200^2)
with contrast and rotation each adding +100 to the mean and +100^2 to the
variance when active (additive extrapolation for combinations the table does
not list). An MLP regressor on patch encodings measures how much outcome
signal each representation carries, via pooled 5-fold out-of-sample R^2.

Scale routing: masking, contrast, and rotation edit every scale's patch;
edge fading edits only the largest scale's patch. With weak_prior the
smallest scale's center is drawn uniformly over the raster per replicate
while larger scales stay anchored at the unit.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from sklearn.neural_network import MLPRegressor

from ._util import derive_seed, philox
from .data_model import RasterBundle, UnitRecord
from .embedding import EncoderSpec, encode
from .errors import (
    DimMismatch,
    NonFiniteLoss,
    NumericalError,
    TooFewUnits,
    UnknownFlagCombination,
)
from .imaging import (
    FetchMode,
    Perturbation,
    PerturbationKind,
    apply_perturbation,
    displace_center,
    fetch,
)

MODE_MULTI = "multi"

_APPLY_ORDER = (
    PerturbationKind.MASK,
    PerturbationKind.EDGE_FADE,
    PerturbationKind.CONTRAST,
    PerturbationKind.ROTATE90,
)


@dataclass(frozen=True)
class SimDesign:
    """One simulation setting: which perturbations, at which scales."""

    perturbations: tuple[PerturbationKind, ...]
    scales: tuple[int, ...] = (32, 256)
    assignment_prob: float = 0.5
    weak_prior: bool = False
    mask_size: int = 2
    contrast_c: float = 2.0
    fade_size: float | None = None
    encoder_dim: int = 64
    replicates: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if len(set(self.perturbations)) != len(self.perturbations):
            raise ValueError(f"duplicate perturbations in {self.perturbations}")
        for p in self.perturbations:
            if not isinstance(p, PerturbationKind):
                raise UnknownFlagCombination(f"unknown perturbation {p!r}")
        if len(self.scales) < 1 or any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"scales must be strictly increasing, got {self.scales}")
        if not 0.0 < self.assignment_prob < 1.0:
            raise ValueError(f"assignment_prob must be in (0,1), got {self.assignment_prob}")
        if self.replicates < 1:
            raise ValueError(f"replicates must be >= 1, got {self.replicates}")
        if self.encoder_dim < 1:
            raise ValueError(f"encoder_dim must be >= 1, got {self.encoder_dim}")


@dataclass(frozen=True)
class MlpConfig:
    """Regressor architecture and training settings (128 -> 32 -> linear out)."""

    hidden1: int = 128
    hidden2: int = 32
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("hidden1", "hidden2", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


def outcome_moments(
    masked: bool, faded: bool, contrasted: bool = False, rotated: bool = False
) -> tuple[float, float]:
    """(mean, sd) of the outcome distribution for one flag combination."""
    mean = 100.0 * masked - 100.0 * faded
    var = 10000.0 * masked + 10000.0 * faded + 20000.0 * (masked and faded)
    if contrasted:
        mean += 100.0
        var += 10000.0
    if rotated:
        mean += 100.0
        var += 10000.0
    return mean, float(np.sqrt(var))


def assign_perturbations(
    design: SimDesign, n: int, seed: int
) -> dict[PerturbationKind, np.ndarray]:
    """Independent Bernoulli(assignment_prob) flags per perturbation and unit."""
    return {
        kind: philox(derive_seed(seed, "assign", kind.value)).random(n) < design.assignment_prob
        for kind in design.perturbations
    }


def generate_outcomes(
    flags: Mapping[PerturbationKind, np.ndarray], seed: int, n: int | None = None
) -> np.ndarray:
    """Draw outcomes for the given flag table; deterministic per seed."""
    for key in flags:
        if not isinstance(key, PerturbationKind):
            raise UnknownFlagCombination(f"unknown perturbation flag {key!r}")
    lengths = {int(np.asarray(v).shape[0]) for v in flags.values()}
    if len(lengths) > 1:
        raise DimMismatch(f"flag arrays have mismatched lengths {sorted(lengths)}")
    if lengths:
        n = lengths.pop()
    elif n is None:
        raise DimMismatch("empty flag table needs an explicit n")
    zeros = np.zeros(n, dtype=bool)
    m = np.asarray(flags.get(PerturbationKind.MASK, zeros), dtype=bool)
    e = np.asarray(flags.get(PerturbationKind.EDGE_FADE, zeros), dtype=bool)
    c = np.asarray(flags.get(PerturbationKind.CONTRAST, zeros), dtype=bool)
    r = np.asarray(flags.get(PerturbationKind.ROTATE90, zeros), dtype=bool)
    mean = 100.0 * m - 100.0 * e + 100.0 * c + 100.0 * r
    var = 10000.0 * m + 10000.0 * e + 20000.0 * (m & e) + 10000.0 * c + 10000.0 * r
    z = philox(derive_seed(seed, "outcome")).standard_normal(n)
    return mean + np.sqrt(var) * z


@dataclass
class MlpModel:
    """Trained regressor with its target standardization."""

    reg: MLPRegressor | None
    y_mean: float
    y_scale: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.reg is None:
            return np.full(X.shape[0], self.y_mean)
        out = self.reg.predict(X) * self.y_scale + self.y_mean
        if not np.all(np.isfinite(out)):
            raise NumericalError("MLP produced non-finite predictions")
        return out


def train_mlp(X: np.ndarray, y: np.ndarray, cfg: MlpConfig) -> MlpModel:
    """MSE training on standardized targets; raises NonFiniteLoss on divergence."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != y.shape[0]:
        raise DimMismatch(f"X has {X.shape[0]} rows, y has {y.shape[0]}")
    y_mean = float(y.mean())
    y_scale = float(y.std())
    if y_scale == 0.0:
        return MlpModel(reg=None, y_mean=y_mean, y_scale=0.0)
    targets = (y - y_mean) / y_scale
    reg = MLPRegressor(
        hidden_layer_sizes=(cfg.hidden1, cfg.hidden2),
        activation="relu",
        solver="adam",
        alpha=0.0,
        batch_size=min(cfg.batch_size, X.shape[0]),
        learning_rate_init=cfg.learning_rate,
        max_iter=cfg.epochs,
        shuffle=True,
        random_state=cfg.seed % 2 ** 32,
        tol=0.0,
        n_iter_no_change=cfg.epochs + 1,
        early_stopping=False,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            reg.fit(X, targets)
        except ValueError as exc:
            if "non-finite" not in str(exc):
                raise
            partial = np.asarray(getattr(reg, "loss_curve_", []), dtype=np.float64)
            bad = np.flatnonzero(~np.isfinite(partial))
            epoch = int(bad[0]) + 1 if bad.size else partial.shape[0] + 1
            raise NonFiniteLoss(f"training loss non-finite at epoch {epoch}") from exc
    losses = np.asarray(reg.loss_curve_, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise NonFiniteLoss(f"training loss non-finite at epoch {int(bad[0]) + 1}")
    return MlpModel(reg=reg, y_mean=y_mean, y_scale=y_scale)


@dataclass(frozen=True)
class CvR2:
    r2: float
    degenerate: bool
    fold_id: np.ndarray


def cv_r2(
    X: np.ndarray,
    y: np.ndarray,
    cfg: MlpConfig,
    k: int = 5,
    seed: int | None = None,
    folds: np.ndarray | None = None,
) -> CvR2:
    """Pooled out-of-sample R^2 = 1 - SSE/SST over seeded random folds.

    Every fold's regressor uses cfg.seed, so the result is invariant to fold
    relabeling. A constant target (SST = 0) is flagged degenerate with nan R^2.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if y.shape[0] != n:
        raise DimMismatch(f"X has {n} rows, y has {y.shape[0]}")
    if n < 50:
        raise TooFewUnits(f"cv_r2 needs n >= 50, got {n}")
    if folds is not None:
        fold_id = np.asarray(folds, dtype=np.int64)
        if fold_id.shape[0] != n:
            raise DimMismatch(f"folds length {fold_id.shape[0]} != n {n}")
    else:
        if not 2 <= k <= n:
            raise ValueError(f"k must be in [2, {n}], got {k}")
        perm = philox(derive_seed(seed if seed is not None else cfg.seed, "cv-folds")).permutation(n)
        fold_id = np.empty(n, dtype=np.int64)
        sizes = np.full(k, n // k, dtype=np.int64)
        sizes[: n % k] += 1
        start = 0
        for f, size in enumerate(sizes):
            fold_id[perm[start:start + size]] = f
            start += size
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        return CvR2(r2=float("nan"), degenerate=True, fold_id=fold_id)
    sse = 0.0
    for f in sorted(set(fold_id.tolist())):
        test = fold_id == f
        train = ~test
        if not np.any(train) or not np.any(test):
            continue
        model = train_mlp(X[train], y[train], cfg)
        pred = model.predict(X[test])
        sse += float(np.sum((y[test] - pred) ** 2))
    return CvR2(r2=1.0 - sse / sst, degenerate=False, fold_id=fold_id)


@dataclass(frozen=True)
class SimReport:
    """Replicate-aggregated cv R^2 for one (design, mode)."""

    mode: int | str
    perturbations: tuple[PerturbationKind, ...]
    r2_mean: float
    r2_sd: float
    r2_values: tuple[float, ...]
    degenerate: bool
    n_replicates: int


def _perturbation_for(kind: PerturbationKind, design: SimDesign) -> Perturbation:
    if kind is PerturbationKind.MASK:
        return Perturbation.mask(design.mask_size)
    if kind is PerturbationKind.EDGE_FADE:
        return Perturbation.edge_fade(design.fade_size)
    if kind is PerturbationKind.CONTRAST:
        return Perturbation.contrast(design.contrast_c)
    return Perturbation.rotate90()


def _applies_at_scale(kind: PerturbationKind, s: int, design: SimDesign) -> bool:
    if kind is PerturbationKind.EDGE_FADE:
        return s == max(design.scales)
    return True


def _scale_matrix(
    bundle: RasterBundle,
    units: Sequence[UnitRecord],
    design: SimDesign,
    flags: Mapping[PerturbationKind, np.ndarray],
    s: int,
    enc: EncoderSpec,
    rep_seed: int,
    fetch_mode: FetchMode,
) -> np.ndarray:
    out = np.empty((len(units), enc.dim), dtype=np.float32)
    weak_scale = design.weak_prior and s == min(design.scales)
    for i, unit in enumerate(units):
        center = unit.x
        if weak_scale:
            center = displace_center(
                unit.x, derive_seed(rep_seed, "weak", unit.id), bundle, s
            )
        patch = fetch(bundle, center, s, mode=fetch_mode, displaced=weak_scale)
        for kind in _APPLY_ORDER:
            if kind in flags and flags[kind][i] and _applies_at_scale(kind, s, design):
                patch = apply_perturbation(patch, _perturbation_for(kind, design))
        out[i] = encode(patch, enc, unit_id=unit.id)
    return out


def _normalize_mode(mode: int | str, design: SimDesign) -> int | str:
    if mode == MODE_MULTI:
        return MODE_MULTI
    mode = int(mode)
    if mode not in design.scales:
        raise ValueError(f"mode scale {mode} not in design scales {design.scales}")
    return mode


def run_design(
    bundle: RasterBundle,
    units: Sequence[UnitRecord],
    design: SimDesign,
    modes: Sequence[int | str],
    mlp: MlpConfig | None = None,
    fetch_mode: FetchMode = FetchMode.CLAMP,
) -> dict[int | str, SimReport]:
    """Run all requested modes, sharing per-replicate encodings across modes."""
    mlp = mlp if mlp is not None else MlpConfig()
    modes = [_normalize_mode(m, design) for m in modes]
    needed = sorted(
        set(design.scales if MODE_MULTI in modes else [])
        | {m for m in modes if isinstance(m, int)}
    )
    enc = EncoderSpec(kind="pyramid", dim=design.encoder_dim, seed=design.seed)
    n = len(units)
    r2: dict[int | str, list[float]] = {m: [] for m in modes}
    degenerate = {m: False for m in modes}
    for r in range(design.replicates):
        rep_seed = derive_seed(design.seed, "rep", r)
        flags = assign_perturbations(design, n, rep_seed)
        y = generate_outcomes(flags, derive_seed(rep_seed, "y"), n)
        mats = {
            s: _scale_matrix(bundle, units, design, flags, s, enc, rep_seed, fetch_mode)
            for s in needed
        }
        for mode in modes:
            if mode == MODE_MULTI:
                X = np.concatenate([mats[s] for s in design.scales], axis=1)
            else:
                X = mats[mode]
            cv = cv_r2(
                X, y, replace(mlp, seed=derive_seed(rep_seed, "mlp")),
                k=5, seed=derive_seed(rep_seed, "cv"),
            )
            degenerate[mode] = degenerate[mode] or cv.degenerate
            r2[mode].append(cv.r2)
    reports = {}
    for mode in modes:
        vals = np.array(r2[mode], dtype=np.float64)
        bad = degenerate[mode]
        reports[mode] = SimReport(
            mode=mode,
            perturbations=design.perturbations,
            r2_mean=float("nan") if bad else float(vals.mean()),
            r2_sd=float("nan") if bad or len(vals) < 2 else float(vals.std(ddof=1)),
            r2_values=tuple(float(v) for v in vals),
            degenerate=bad,
            n_replicates=design.replicates,
        )
    return reports


def run_experiment(
    bundle: RasterBundle,
    units: Sequence[UnitRecord],
    design: SimDesign,
    mode: int | str,
    mlp: MlpConfig | None = None,
    fetch_mode: FetchMode = FetchMode.CLAMP,
) -> SimReport:
    """Single-mode convenience wrapper around run_design."""
    key = _normalize_mode(mode, design)
    return run_design(bundle, units, design, [key], mlp, fetch_mode)[key]
