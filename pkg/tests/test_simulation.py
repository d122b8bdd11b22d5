import numpy as np
import pytest

from multiscale_cate import (
    MlpConfig,
    PerturbationKind,
    SimDesign,
    assign_perturbations,
    cv_r2,
    generate_outcomes,
    outcome_moments,
    run_design,
    run_experiment,
    train_mlp,
)
from multiscale_cate.errors import (
    DimMismatch,
    NonFiniteLoss,
    TooFewUnits,
    UnknownFlagCombination,
)
from multiscale_cate.simulation import _scale_matrix
from multiscale_cate.embedding import EncoderSpec
from multiscale_cate.imaging import FetchMode
from multiscale_cate._util import philox

from conftest import make_bundle, make_units

M = PerturbationKind.MASK
E = PerturbationKind.EDGE_FADE
C = PerturbationKind.CONTRAST
R = PerturbationKind.ROTATE90


def test_outcome_moment_table():
    assert outcome_moments(False, False) == (0.0, 0.0)
    assert outcome_moments(True, False) == (100.0, 100.0)
    assert outcome_moments(False, True) == (-100.0, 100.0)
    assert outcome_moments(True, True) == (0.0, 200.0)
    # contrast and rotation extrapolate additively
    assert outcome_moments(False, False, contrasted=True) == (100.0, 100.0)
    assert outcome_moments(False, False, rotated=True) == (100.0, 100.0)
    mean, sd = outcome_moments(True, True, contrasted=True, rotated=True)
    assert mean == 200.0
    assert sd == pytest.approx(np.sqrt(60000.0))


def test_generate_outcomes_monte_carlo():
    n = 200_000
    ones = np.ones(n, dtype=bool)
    zeros = np.zeros(n, dtype=bool)
    y = generate_outcomes({M: ones, E: zeros}, seed=1)
    assert y.mean() == pytest.approx(100.0, abs=3 * 100 / np.sqrt(n))
    assert y.std() == pytest.approx(100.0, abs=1.0)
    y2 = generate_outcomes({M: ones, E: ones}, seed=2)
    assert y2.mean() == pytest.approx(0.0, abs=3 * 200 / np.sqrt(n))
    assert y2.std() == pytest.approx(200.0, abs=2.0)


def test_generate_outcomes_deterministic_and_empty():
    flags = {M: np.array([True, False, True])}
    np.testing.assert_array_equal(
        generate_outcomes(flags, seed=5), generate_outcomes(flags, seed=5)
    )
    assert not np.array_equal(generate_outcomes(flags, seed=5), generate_outcomes(flags, seed=6))
    # no perturbations: outcome is exactly zero
    np.testing.assert_array_equal(generate_outcomes({}, seed=0, n=4), np.zeros(4))
    with pytest.raises(DimMismatch, match="explicit n"):
        generate_outcomes({}, seed=0)


def test_generate_outcomes_errors():
    with pytest.raises(DimMismatch, match="mismatched"):
        generate_outcomes({M: np.zeros(3, bool), E: np.zeros(4, bool)}, seed=0)
    with pytest.raises(UnknownFlagCombination):
        generate_outcomes({"mask": np.zeros(3, bool)}, seed=0)


def test_assign_perturbations():
    design = SimDesign(perturbations=(M, E), assignment_prob=0.3)
    n = 50_000
    flags = assign_perturbations(design, n, seed=7)
    assert set(flags) == {M, E}
    for kind in (M, E):
        rate = flags[kind].mean()
        assert rate == pytest.approx(0.3, abs=3 * np.sqrt(0.3 * 0.7 / n))
    # independent streams per kind, deterministic per seed
    assert not np.array_equal(flags[M], flags[E])
    again = assign_perturbations(design, n, seed=7)
    np.testing.assert_array_equal(flags[M], again[M])


def test_sim_design_validation():
    with pytest.raises(ValueError, match="duplicate"):
        SimDesign(perturbations=(M, M))
    with pytest.raises(UnknownFlagCombination):
        SimDesign(perturbations=("mask",))
    with pytest.raises(ValueError, match="strictly increasing"):
        SimDesign(perturbations=(M,), scales=(64, 32))
    with pytest.raises(ValueError, match="assignment_prob"):
        SimDesign(perturbations=(M,), assignment_prob=1.0)
    with pytest.raises(ValueError, match="replicates"):
        SimDesign(perturbations=(M,), replicates=0)
    SimDesign(perturbations=())  # empty is allowed


def test_mlp_config_validation():
    with pytest.raises(ValueError, match="hidden1"):
        MlpConfig(hidden1=0)
    with pytest.raises(ValueError, match="learning_rate"):
        MlpConfig(learning_rate=0.0)


FAST_MLP = MlpConfig(hidden1=32, hidden2=16, epochs=150, batch_size=32, seed=0)


def test_mlp_recovers_linear_signal():
    rng = philox("mlp", 0)
    X = rng.standard_normal((300, 4))
    y = 2.0 * X[:, 0] - X[:, 1]
    model = train_mlp(X, y, FAST_MLP)
    pred = model.predict(X)
    r2 = 1.0 - np.sum((y - pred) ** 2) / np.sum((y - y.mean()) ** 2)
    assert r2 > 0.9


def test_mlp_constant_target():
    X = philox("mlp", 1).standard_normal((60, 3))
    model = train_mlp(X, np.full(60, 5.0), FAST_MLP)
    assert model.reg is None
    np.testing.assert_array_equal(model.predict(X), np.full(60, 5.0))


def test_mlp_scaling_equivariance_exact():
    # doubling y doubles predictions bit-exactly: standardized targets match
    rng = philox("mlp", 2)
    X = rng.standard_normal((80, 3))
    y = X[:, 0] + 0.5 * rng.standard_normal(80)
    m1 = train_mlp(X, y, FAST_MLP)
    m2 = train_mlp(X, 2.0 * y, FAST_MLP)
    np.testing.assert_array_equal(m2.predict(X), 2.0 * m1.predict(X))


def test_mlp_divergence_raises_with_epoch():
    rng = philox("mlp", 3)
    X = 1e4 * rng.standard_normal((64, 3))
    y = rng.standard_normal(64)
    bad = MlpConfig(hidden1=16, hidden2=8, epochs=20, batch_size=64, learning_rate=1e150)
    with pytest.raises(NonFiniteLoss, match=r"epoch \d+"):
        train_mlp(X, y, bad)


def test_mlp_shape_error():
    with pytest.raises(DimMismatch):
        train_mlp(np.zeros((5, 2)), np.zeros(4), FAST_MLP)


def test_cv_r2_basics():
    rng = philox("cv", 0)
    X = rng.standard_normal((60, 3))
    y = 3.0 * X[:, 0]
    out = cv_r2(X, y, FAST_MLP, k=5, seed=1)
    assert not out.degenerate
    assert out.r2 > 0.5
    assert out.fold_id.shape == (60,)
    counts = np.bincount(out.fold_id)
    np.testing.assert_array_equal(counts, [12, 12, 12, 12, 12])
    with pytest.raises(TooFewUnits):
        cv_r2(X[:49], y[:49], FAST_MLP)
    with pytest.raises(ValueError, match="k must"):
        cv_r2(X, y, FAST_MLP, k=1)
    with pytest.raises(DimMismatch, match="folds length"):
        cv_r2(X, y, FAST_MLP, folds=np.zeros(59, dtype=np.int64))


def test_cv_r2_fold_sizes_uneven():
    rng = philox("cv", 1)
    X = rng.standard_normal((53, 2))
    y = X[:, 0]
    out = cv_r2(X, y, MlpConfig(hidden1=8, hidden2=4, epochs=5), k=5, seed=2)
    counts = sorted(np.bincount(out.fold_id).tolist())
    assert counts == [10, 10, 10, 11, 12] or counts == [10, 10, 11, 11, 11]


def test_cv_r2_fold_relabel_invariance():
    rng = philox("cv", 2)
    X = rng.standard_normal((50, 2))
    y = X[:, 0] + 0.1 * rng.standard_normal(50)
    folds = np.repeat(np.arange(5), 10)
    relabeled = (folds + 2) % 5  # same partition, different labels
    a = cv_r2(X, y, FAST_MLP, folds=folds)
    b = cv_r2(X, y, FAST_MLP, folds=relabeled)
    assert a.r2 == b.r2


def test_cv_r2_degenerate():
    X = philox("cv", 3).standard_normal((50, 2))
    out = cv_r2(X, np.zeros(50), FAST_MLP)
    assert out.degenerate
    assert np.isnan(out.r2)


# --- full designs on a small raster ---

TINY_MLP = MlpConfig(hidden1=16, hidden2=8, epochs=20, batch_size=32)


def _design_setup(n=60, seed=0):
    bundle = make_bundle(width=48, height=48, bands=2, seed=seed)
    units = make_units(n, bundle, seed=seed, margin=10)
    return bundle, units


def test_run_design_shapes_and_determinism():
    bundle, units = _design_setup()
    design = SimDesign(perturbations=(M,), scales=(8, 16), mask_size=4,
                       encoder_dim=16, replicates=2, seed=3)
    reports = run_design(bundle, units, design, ["multi", 8, 16], mlp=TINY_MLP)
    assert set(reports) == {"multi", 8, 16}
    for rep in reports.values():
        assert rep.n_replicates == 2
        assert len(rep.r2_values) == 2
        assert not rep.degenerate
        assert np.isfinite(rep.r2_mean) and np.isfinite(rep.r2_sd)
    again = run_design(bundle, units, design, ["multi", 8, 16], mlp=TINY_MLP)
    assert reports == again
    single = run_experiment(bundle, units, design, 8, mlp=TINY_MLP)
    assert single == reports[8]


def test_run_design_empty_perturbations_degenerate():
    bundle, units = _design_setup()
    design = SimDesign(perturbations=(), scales=(8,), encoder_dim=8,
                       replicates=1, seed=1)
    rep = run_experiment(bundle, units, design, 8, mlp=TINY_MLP)
    assert rep.degenerate
    assert np.isnan(rep.r2_mean) and np.isnan(rep.r2_sd)


def test_run_design_invalid_mode():
    bundle, units = _design_setup()
    design = SimDesign(perturbations=(M,), scales=(8, 16), encoder_dim=8, replicates=1)
    with pytest.raises(ValueError, match="not in design scales"):
        run_experiment(bundle, units, design, 12, mlp=TINY_MLP)


def test_weak_prior_only_moves_min_scale():
    bundle, units = _design_setup(seed=4)
    kwargs = dict(perturbations=(M,), scales=(8, 16), mask_size=4,
                  encoder_dim=12, replicates=1, seed=5)
    anchored = SimDesign(weak_prior=False, **kwargs)
    weak = SimDesign(weak_prior=True, **kwargs)
    r_anchored = run_design(bundle, units, anchored, [8, 16], mlp=TINY_MLP)
    r_weak = run_design(bundle, units, weak, [8, 16], mlp=TINY_MLP)
    assert r_anchored[16].r2_values == r_weak[16].r2_values  # max scale untouched
    assert r_anchored[8].r2_values != r_weak[8].r2_values


def test_edge_fade_applies_only_at_max_scale():
    bundle, units = _design_setup(seed=6)
    design = SimDesign(perturbations=(E,), scales=(8, 16), encoder_dim=12, replicates=1, seed=7)
    enc = EncoderSpec(dim=12, seed=design.seed)
    all_on = {E: np.ones(len(units), dtype=bool)}
    none = {}
    m8_faded = _scale_matrix(bundle, units, design, all_on, 8, enc, 0, FetchMode.CLAMP)
    m8_plain = _scale_matrix(bundle, units, design, none, 8, enc, 0, FetchMode.CLAMP)
    np.testing.assert_array_equal(m8_faded, m8_plain)
    m16_faded = _scale_matrix(bundle, units, design, all_on, 16, enc, 0, FetchMode.CLAMP)
    m16_plain = _scale_matrix(bundle, units, design, none, 16, enc, 0, FetchMode.CLAMP)
    assert not np.array_equal(m16_faded, m16_plain)
