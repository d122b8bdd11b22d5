"""Honest causal forest with cross-fitted nuisances and doubly robust scores.

Estimator sketch: a K=2 cross-fitted regression forest gives outcome
predictions m_hat; the treatment propensity e_hat is a known constant under
randomized assignment (the sample treated fraction by default) or a cross-fit
regression forest when configured. Trees are grown on Robinson pseudo-outcomes
U_i = (y_i - m_hat_i)/(w_i - e_hat_i) with weights rho_i = (w_i - e_hat_i)^2,
maximizing weighted between-child variance of U; each tree's leaf effect is the
rho-weighted mean of U over an honest half of the subsample that never
influenced the splits. Prediction averages leaf estimates over trees whose leaf
holds both arms.

Columns are identified by content hash, not position: duplicated columns
collapse to one feature for splitting and mtry sampling, and predictions are
invariant to consistent column permutations.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass

import numpy as np

from ._trees import grow_tree, route_rows
from ._util import canonical_json, derive_seed, philox, sha256_bytes
from .errors import (
    BlocksDontCover,
    DimMismatch,
    NonFiniteValue,
    NumericalError,
    SingleArm,
    TooFewUnits,
)

PROPENSITY_SAMPLE_RATE = "sample-rate"
PROPENSITY_FOREST = "forest"

IMPORTANCE_MAX_DEPTH = 4
PROPENSITY_CLAMP = 0.01


@dataclass(frozen=True)
class ForestConfig:
    num_trees: int = 2000
    min_node_size: int = 5
    honesty_fraction: float = 0.5
    subsample_fraction: float = 0.5
    mtry: int | None = None
    seed: int = 0
    nuisance_trees: int | None = None
    propensity: float | str = PROPENSITY_SAMPLE_RATE

    def __post_init__(self) -> None:
        if self.num_trees < 1:
            raise ValueError(f"num_trees must be >= 1, got {self.num_trees}")
        if self.min_node_size < 1:
            raise ValueError(f"min_node_size must be >= 1, got {self.min_node_size}")
        for name in ("honesty_fraction", "subsample_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must be in (0,1), got {v}")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError(f"mtry must be >= 1, got {self.mtry}")
        if self.nuisance_trees is not None and self.nuisance_trees < 1:
            raise ValueError(f"nuisance_trees must be >= 1, got {self.nuisance_trees}")
        if isinstance(self.propensity, str):
            if self.propensity not in (PROPENSITY_SAMPLE_RATE, PROPENSITY_FOREST):
                raise ValueError(f"unknown propensity policy {self.propensity!r}")
        elif not 0.0 < self.propensity < 1.0:
            raise ValueError(f"constant propensity must be in (0,1), got {self.propensity}")

    def resolved_nuisance_trees(self) -> int:
        if self.nuisance_trees is not None:
            return self.nuisance_trees
        return min(500, self.num_trees)


def _column_order(X: np.ndarray) -> np.ndarray:
    """First-occurrence original indices of distinct columns, sorted by content hash."""
    first: dict[str, int] = {}
    for j in range(X.shape[1]):
        h = sha256_bytes(np.ascontiguousarray(X[:, j]).tobytes())
        if h not in first:
            first[h] = j
    return np.array([first[h] for h in sorted(first)], dtype=np.int64)


def _default_mtry(d: int) -> int:
    return max(1, math.ceil(math.sqrt(d)))


@dataclass
class _Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    leaf_value: np.ndarray
    leaf_valid: np.ndarray
    in_sample: np.ndarray


def _grow_and_estimate(
    X_int: np.ndarray,
    struct_rows: np.ndarray,
    honest_rows: np.ndarray,
    U: np.ndarray,
    rho: np.ndarray,
    w: np.ndarray | None,
    min_node: int,
    mtry: int,
    kernel_seed: int,
) -> _Tree:
    """Grow on struct_rows, estimate leaves from honest_rows.

    w None means regression mode: leaves are valid whenever they hold weight.
    """
    feature, threshold, left, right, depth, n_nodes = grow_tree(
        X_int, struct_rows, U, rho, min_node, mtry, kernel_seed
    )
    leaves = route_rows(X_int, honest_rows, feature, threshold, left, right)
    sum_r = np.bincount(leaves, weights=rho[honest_rows], minlength=n_nodes)
    sum_ru = np.bincount(
        leaves, weights=rho[honest_rows] * U[honest_rows], minlength=n_nodes
    )
    with np.errstate(invalid="ignore", divide="ignore"):
        leaf_value = np.where(sum_r > 0.0, sum_ru / np.where(sum_r > 0.0, sum_r, 1.0), 0.0)
    if w is None:
        leaf_valid = sum_r > 0.0
    else:
        wh = w[honest_rows]
        nt = np.bincount(leaves[wh == 1], minlength=n_nodes)
        nc = np.bincount(leaves[wh == 0], minlength=n_nodes)
        leaf_valid = (sum_r > 0.0) & (nt > 0) & (nc > 0)
    in_sample = np.union1d(struct_rows, honest_rows)
    return _Tree(feature, threshold, left, right, depth, leaf_value, leaf_valid, in_sample)


class _RegForest:
    """Plain (non-honest) regression forest used for nuisances."""

    def __init__(self, kept: np.ndarray, trees: list[_Tree], feature_dim: int):
        self.kept = kept
        self.trees = trees
        self.feature_dim = feature_dim

    @classmethod
    def fit(
        cls,
        X: np.ndarray,
        y: np.ndarray,
        num_trees: int,
        min_node_size: int,
        subsample_fraction: float,
        mtry: int | None,
        seed: int,
    ) -> "_RegForest":
        n, d = X.shape
        kept = _column_order(X)
        X_int = np.ascontiguousarray(X[:, kept])
        m = max(2, int(n * subsample_fraction))
        mtry_v = mtry if mtry is not None else _default_mtry(len(kept))
        ones = np.ones(n, dtype=np.float64)
        trees = []
        for t in range(num_trees):
            ss = philox(derive_seed(seed, "tree", t)).permutation(n)[:m]
            trees.append(
                _grow_and_estimate(
                    X_int, ss, ss, y, ones, None,
                    min_node_size, mtry_v, derive_seed(seed, "tree-mtry", t),
                )
            )
        return cls(kept, trees, d)

    def predict(self, X: np.ndarray) -> np.ndarray:
        if X.shape[1] != self.feature_dim:
            raise DimMismatch(f"X has {X.shape[1]} features, forest expects {self.feature_dim}")
        X_int = np.ascontiguousarray(np.asarray(X, dtype=np.float64)[:, self.kept])
        rows = np.arange(X_int.shape[0], dtype=np.int64)
        out = np.zeros(X_int.shape[0], dtype=np.float64)
        for tree in self.trees:
            leaves = route_rows(X_int, rows, tree.feature, tree.threshold, tree.left, tree.right)
            out += tree.leaf_value[leaves]
        return out / len(self.trees)


@dataclass
class DrScores:
    """Doubly robust per-unit CATE scores; mean(gamma) estimates the ATE."""

    gamma: np.ndarray
    fold_id: np.ndarray


class CausalForestModel:
    """Fitted honest causal forest.

    nuisance_m holds the cross-fitted outcome predictions on the training data
    (values, not forest objects) with their fold assignment; nuisance_e is the
    per-unit propensity used in residualization. Training data is retained for
    out-of-bag prediction.
    """

    def __init__(
        self,
        config: ForestConfig,
        feature_dim: int,
        kept: np.ndarray,
        trees: list[_Tree],
        ate: float,
        constant_tau: bool,
        e_policy: str,
        nuisance_e: np.ndarray,
        nuisance_m: np.ndarray,
        fold_id: np.ndarray,
        X_train: np.ndarray,
        w_train: np.ndarray,
        y_train: np.ndarray,
    ):
        self.config = config
        self.feature_dim = feature_dim
        self.kept = kept
        self.trees = trees
        self.ate = ate
        self.constant_tau = constant_tau
        self.e_policy = e_policy
        self.nuisance_e = nuisance_e
        self.nuisance_m = nuisance_m
        self.fold_id = fold_id
        self.X_train = X_train
        self.w_train = w_train
        self.y_train = y_train


def _validate_xwy(X: np.ndarray, w: np.ndarray, y: np.ndarray):
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    w = np.asarray(w, dtype=np.int64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[1] < 1:
        raise DimMismatch(f"X must be 2-d with >= 1 column, got shape {X.shape}")
    n = X.shape[0]
    if w.shape[0] != n or y.shape[0] != n:
        raise DimMismatch(f"length mismatch: X {n} rows, w {w.shape[0]}, y {y.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteValue("X contains non-finite values")
    if not np.all(np.isfinite(y)):
        raise NonFiniteValue("y contains non-finite values")
    if not np.all((w == 0) | (w == 1)):
        raise SingleArm(f"w must be binary 0/1, got values {np.unique(w)}")
    return X, w, y


def _half_folds(n: int, seed: int) -> np.ndarray:
    fold_id = np.zeros(n, dtype=np.int64)
    perm = philox(seed).permutation(n)
    fold_id[perm[n // 2:]] = 1
    return fold_id


def _crossfit_regression(
    X: np.ndarray,
    target: np.ndarray,
    fold_id: np.ndarray,
    cfg: ForestConfig,
    seed_label: str,
    seed: int,
    rows_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Out-of-fold regression forest predictions, optionally trained on a row subset."""
    out = np.zeros(X.shape[0], dtype=np.float64)
    for f in (0, 1):
        train = fold_id != f
        if rows_mask is not None:
            train = train & rows_mask
        test = fold_id == f
        if not np.any(train):
            raise TooFewUnits(f"fold {f}: no training rows for {seed_label}")
        forest = _RegForest.fit(
            X[train], target[train],
            num_trees=cfg.resolved_nuisance_trees(),
            min_node_size=cfg.min_node_size,
            subsample_fraction=cfg.subsample_fraction,
            mtry=cfg.mtry,
            seed=derive_seed(seed, seed_label, f),
        )
        out[test] = forest.predict(X[test])
    return out


def _propensity(
    X: np.ndarray, w: np.ndarray, fold_id: np.ndarray, cfg: ForestConfig, seed: int
) -> tuple[str, np.ndarray]:
    n = X.shape[0]
    if cfg.propensity == PROPENSITY_SAMPLE_RATE:
        return PROPENSITY_SAMPLE_RATE, np.full(n, float(w.mean()))
    if isinstance(cfg.propensity, float):
        return "constant", np.full(n, cfg.propensity)
    e = _crossfit_regression(X, w.astype(np.float64), fold_id, cfg, "ehat", seed)
    return PROPENSITY_FOREST, np.clip(e, PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP)


def fit(X: np.ndarray, w: np.ndarray, y: np.ndarray, cfg: ForestConfig) -> CausalForestModel:
    """Fit the honest causal forest. Deterministic given (data, config)."""
    X, w, y = _validate_xwy(X, w, y)
    n = X.shape[0]
    if n < 20:
        raise TooFewUnits(f"causal forest needs n >= 20, got {n}")
    if w.min() == w.max():
        raise SingleArm(f"only arm w={w[0]} present")
    kept = _column_order(X)
    X_int = np.ascontiguousarray(X[:, kept])
    mtry = cfg.mtry if cfg.mtry is not None else _default_mtry(len(kept))
    fold_id = _half_folds(n, derive_seed(cfg.seed, "mhat-folds"))
    e_policy, e_hat = _propensity(X_int, w, fold_id, cfg, cfg.seed)
    m_hat = _crossfit_regression(X_int, y, fold_id, cfg, "mhat", cfg.seed)
    resid_w = w.astype(np.float64) - e_hat
    U = (y - m_hat) / resid_w
    rho = resid_w ** 2
    if not np.all(np.isfinite(U)):
        raise NumericalError("non-finite pseudo-outcome; propensity too close to 0/1")
    m = max(2, int(n * cfg.subsample_fraction))
    n_struct = max(1, int(m * cfg.honesty_fraction))
    trees = []
    for t in range(cfg.num_trees):
        ss = philox(derive_seed(cfg.seed, "tree", t)).permutation(n)[:m]
        trees.append(
            _grow_and_estimate(
                X_int, ss[:n_struct], ss[n_struct:], U, rho, w,
                cfg.min_node_size, mtry, derive_seed(cfg.seed, "tree-mtry", t),
            )
        )
    ate = float(np.sum(rho * U) / np.sum(rho))
    constant_tau = all(int(t.feature[0]) == -1 for t in trees)
    return CausalForestModel(
        config=cfg, feature_dim=X.shape[1], kept=kept, trees=trees,
        ate=ate, constant_tau=constant_tau, e_policy=e_policy,
        nuisance_e=e_hat, nuisance_m=m_hat, fold_id=fold_id,
        X_train=X, w_train=w, y_train=y,
    )


def _accumulate(model: CausalForestModel, X_int: np.ndarray, skip_in_sample: bool) -> np.ndarray:
    n = X_int.shape[0]
    rows = np.arange(n, dtype=np.int64)
    sums = np.zeros(n, dtype=np.float64)
    counts = np.zeros(n, dtype=np.int64)
    for tree in model.trees:
        leaves = route_rows(X_int, rows, tree.feature, tree.threshold, tree.left, tree.right)
        ok = tree.leaf_valid[leaves]
        if skip_in_sample:
            mask = np.ones(n, dtype=bool)
            mask[tree.in_sample] = False
            ok = ok & mask
        sums += np.where(ok, tree.leaf_value[leaves], 0.0)
        counts += ok
    return np.where(counts > 0, sums / np.where(counts > 0, counts, 1), model.ate)


def predict(model: CausalForestModel, X: np.ndarray) -> np.ndarray:
    """CATE predictions tau_hat; finite for every row (ATE fallback)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.feature_dim:
        raise DimMismatch(f"X shape {X.shape} incompatible with feature_dim {model.feature_dim}")
    X_int = np.ascontiguousarray(X[:, model.kept])
    return _accumulate(model, X_int, skip_in_sample=False)


def predict_oob(model: CausalForestModel) -> np.ndarray:
    """Out-of-bag tau_hat on the training rows (ATE fallback where no tree is OOB)."""
    X_int = np.ascontiguousarray(model.X_train[:, model.kept])
    return _accumulate(model, X_int, skip_in_sample=True)


def dr_scores(
    model: CausalForestModel,
    X: np.ndarray,
    w: np.ndarray,
    y: np.ndarray,
    seed: int | None = None,
    zero_outcome_model: bool = False,
) -> DrScores:
    """Doubly robust scores with nuisances cross-fitted within (X, w, y).

    Gamma_i = m1(x) - m0(x) + w(y - m1(x))/e - (1 - w)(y - m0(x))/(1 - e),
    with arm-specific K=2 cross-fitted regression forests and e clamped to
    [0.01, 0.99]. zero_outcome_model forces m1 = m0 = 0 (diagnostics/tests).
    """
    X, w, y = _validate_xwy(X, w, y)
    if X.shape[1] != model.feature_dim:
        raise DimMismatch(f"X has {X.shape[1]} features, model expects {model.feature_dim}")
    cfg = model.config
    seed = seed if seed is not None else derive_seed(cfg.seed, "dr")
    n = X.shape[0]
    X_int = np.ascontiguousarray(X[:, model.kept])
    fold_id = _half_folds(n, derive_seed(seed, "dr-folds"))
    _, e_hat = _propensity(X_int, w, fold_id, cfg, seed)
    e_hat = np.clip(e_hat, PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP)
    if zero_outcome_model:
        m1 = np.zeros(n)
        m0 = np.zeros(n)
    else:
        for f in (0, 1):
            for arm in (0, 1):
                if not np.any((fold_id != f) & (w == arm)):
                    raise SingleArm(f"training fold {1 - f} has no arm w={arm} units")
        m1 = _crossfit_regression(X_int, y, fold_id, cfg, "dr-m1", seed, rows_mask=w == 1)
        m0 = _crossfit_regression(X_int, y, fold_id, cfg, "dr-m0", seed, rows_mask=w == 0)
    wf = w.astype(np.float64)
    gamma = m1 - m0 + wf * (y - m1) / e_hat - (1.0 - wf) * (y - m0) / (1.0 - e_hat)
    if not np.all(np.isfinite(gamma)):
        raise NumericalError("non-finite doubly robust score")
    return DrScores(gamma=gamma, fold_id=fold_id)


def variable_importance(model: CausalForestModel) -> np.ndarray:
    """Depth-weighted split frequency per original feature, summing to 1.

    Splits at depths 0..3 count with weight (depth+1)^-2; frequencies are
    normalized within each depth, the weighted sum is normalized overall.
    Duplicated input columns credit their first occurrence.
    """
    depth_counts = np.zeros((IMPORTANCE_MAX_DEPTH, model.feature_dim), dtype=np.float64)
    for tree in model.trees:
        split = tree.feature >= 0
        use = split & (tree.depth < IMPORTANCE_MAX_DEPTH)
        orig = model.kept[tree.feature[use]]
        for d, f in zip(tree.depth[use], orig):
            depth_counts[d, f] += 1.0
    importance = np.zeros(model.feature_dim, dtype=np.float64)
    for d in range(IMPORTANCE_MAX_DEPTH):
        total = depth_counts[d].sum()
        if total > 0:
            importance += depth_counts[d] / total * (d + 1) ** -2
    s = importance.sum()
    return importance / s if s > 0 else importance


def scale_fraction_top10(importance: np.ndarray, blocks: list[tuple[int, int]]) -> float:
    """Fraction of the top-10 features (ties to lower index) in the first block."""
    importance = np.asarray(importance, dtype=np.float64)
    d = importance.shape[0]
    if d < 10:
        raise BlocksDontCover(f"need >= 10 features, got {d}")
    pos = 0
    for start, stop in blocks:
        if start != pos or stop <= start:
            raise BlocksDontCover(f"blocks must tile [0,{d}) contiguously, got {blocks}")
        pos = stop
    if pos != d:
        raise BlocksDontCover(f"blocks cover [0,{pos}) but there are {d} features")
    top = np.argsort(-importance, kind="stable")[:10]
    start, stop = blocks[0]
    return float(np.mean((top >= start) & (top < stop)))


_MODEL_MAGIC = b"MSCF0001"


def _model_payload(model: CausalForestModel) -> bytes:
    cfg = model.config
    header = {
        "config": {
            "num_trees": cfg.num_trees,
            "min_node_size": cfg.min_node_size,
            "honesty_fraction": cfg.honesty_fraction,
            "subsample_fraction": cfg.subsample_fraction,
            "mtry": cfg.mtry,
            "seed": cfg.seed,
            "nuisance_trees": cfg.nuisance_trees,
            "propensity": cfg.propensity,
        },
        "feature_dim": model.feature_dim,
        "ate": model.ate,
        "constant_tau": model.constant_tau,
        "e_policy": model.e_policy,
        "n_trees": len(model.trees),
    }
    buf = io.BytesIO()
    header_bytes = canonical_json(header).encode("utf-8")
    buf.write(_MODEL_MAGIC)
    buf.write(len(header_bytes).to_bytes(8, "little"))
    buf.write(header_bytes)
    arrays: list[np.ndarray] = [
        model.kept, model.nuisance_e, model.nuisance_m, model.fold_id,
        model.X_train, model.w_train, model.y_train,
    ]
    for tree in model.trees:
        arrays.extend([
            tree.feature, tree.threshold, tree.left, tree.right, tree.depth,
            tree.leaf_value, tree.leaf_valid, tree.in_sample,
        ])
    for arr in arrays:
        np.save(buf, np.ascontiguousarray(arr))
    return buf.getvalue()


def save_model(model: CausalForestModel, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(_model_payload(model))


def model_hash(model: CausalForestModel) -> str:
    return sha256_bytes(_model_payload(model))


def load_model(path: str) -> CausalForestModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MODEL_MAGIC))
        if magic != _MODEL_MAGIC:
            raise ValueError(f"not a forest model file (magic {magic!r})")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        c = header["config"]
        cfg = ForestConfig(
            num_trees=c["num_trees"], min_node_size=c["min_node_size"],
            honesty_fraction=c["honesty_fraction"],
            subsample_fraction=c["subsample_fraction"], mtry=c["mtry"],
            seed=c["seed"], nuisance_trees=c["nuisance_trees"],
            propensity=c["propensity"],
        )
        kept = np.load(fh)
        nuisance_e = np.load(fh)
        nuisance_m = np.load(fh)
        fold_id = np.load(fh)
        X_train = np.load(fh)
        w_train = np.load(fh)
        y_train = np.load(fh)
        trees = []
        for _ in range(header["n_trees"]):
            trees.append(_Tree(*[np.load(fh) for _ in range(8)]))
    return CausalForestModel(
        config=cfg, feature_dim=header["feature_dim"], kept=kept, trees=trees,
        ate=header["ate"], constant_tau=header["constant_tau"],
        e_policy=header["e_policy"], nuisance_e=nuisance_e, nuisance_m=nuisance_m,
        fold_id=fold_id, X_train=X_train, w_train=w_train, y_train=y_train,
    )
