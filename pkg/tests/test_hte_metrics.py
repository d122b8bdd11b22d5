import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multiscale_cate import (
    ForestConfig,
    PipelineConfig,
    PriorityRule,
    policy_gain,
    qini_curve,
    qini_pipeline,
    rate,
    rate_point,
    rate_ratio_pipeline,
    toc_curve,
)
from multiscale_cate.errors import DimMismatch, TooFewUnits
from multiscale_cate.hte_metrics import _score_half, _split_halves
from multiscale_cate._util import derive_seed, philox

from conftest import make_bundle, make_units


def _brute_point(gamma, scores, weighting):
    # independent oracle: explicit sort and loops
    n = len(gamma)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    ranked = [gamma[i] for i in order]
    mean = sum(gamma) / n
    total = 0.0
    for j in range(1, n + 1):
        toc = sum(ranked[:j]) / j - mean
        total += toc if weighting == "autoc" else (j / n) * toc
    return total / n


@given(
    st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=8),
    st.integers(0, 2**31),
    st.sampled_from(["autoc", "qini"]),
)
@settings(max_examples=200)
def test_rate_point_matches_enumeration(gamma, seed, weighting):
    n = len(gamma)
    scores = philox("enum", seed).standard_normal(n)
    scores = np.unique(scores)[:n]  # strictly distinct, any order fine
    while scores.shape[0] < n:
        scores = np.concatenate([scores, scores[-1:] + 1.0])
    got = rate_point(np.array(gamma), scores, weighting)
    want = _brute_point(gamma, scores.tolist(), weighting)
    assert got == pytest.approx(want, abs=1e-12)


def test_autoc_worked_example():
    gamma = np.array([4.0, 3.0, 2.0, 1.0])
    scores = np.array([4.0, 3.0, 2.0, 1.0])
    np.testing.assert_allclose(toc_curve(gamma, scores), [1.5, 1.0, 0.5, 0.0])
    assert rate_point(gamma, scores, "autoc") == pytest.approx(0.75)


def test_tie_breaking():
    gamma = np.array([1.0, 2.0, 3.0])
    tied = np.zeros(3)
    # no ids: position breaks ties ascending
    rule = PriorityRule(scores=tied)
    np.testing.assert_array_equal(rule.ranking(), [0, 1, 2])
    # ids reorder the ties
    rule2 = PriorityRule(scores=tied, unit_ids=("c", "a", "b"))
    np.testing.assert_array_equal(rule2.ranking(), [1, 2, 0])
    assert rate_point(gamma, rule) != rate_point(gamma, rule2)


def test_monotone_transform_invariance():
    rng = philox("mono", 0)
    gamma = rng.standard_normal(50)
    scores = rng.standard_normal(50)
    a = rate_point(gamma, scores, "autoc")
    b = rate_point(gamma, np.exp(scores), "autoc")
    assert a == b  # identical ranking, bit-identical point


def test_qini_reversal_negates():
    rng = philox("rev", 1)
    gamma = rng.standard_normal(60)
    scores = rng.standard_normal(60)
    q = rate_point(gamma, scores, "qini")
    q_rev = rate_point(gamma, -scores, "qini")
    assert q == pytest.approx(-q_rev, abs=1e-12)


def test_autoc_translation_and_scaling():
    rng = philox("affine", 2)
    gamma = rng.standard_normal(40)
    scores = rng.standard_normal(40)
    base = rate_point(gamma, scores, "autoc")
    shifted = rate_point(gamma + 17.0, scores, "autoc")
    scaled = rate_point(3.0 * gamma, scores, "autoc")
    assert shifted == pytest.approx(base, abs=1e-10)
    assert scaled == pytest.approx(3.0 * base, abs=1e-10)


def test_priority_rule_validation():
    with pytest.raises(DimMismatch):
        PriorityRule(scores=np.zeros((2, 2)))
    with pytest.raises(DimMismatch):
        PriorityRule(scores=np.array([1.0, np.nan]))
    with pytest.raises(DimMismatch):
        PriorityRule(scores=np.zeros(3), unit_ids=("a", "b"))
    cdf = PriorityRule(scores=np.array([3.0, 1.0, 2.0])).cdf()
    np.testing.assert_allclose(cdf, [1.0, 1 / 3, 2 / 3])


def test_rate_errors():
    gamma = np.arange(30.0)
    with pytest.raises(DimMismatch):
        rate_point(gamma, gamma[:-1])
    with pytest.raises(TooFewUnits):
        rate(gamma[:19], gamma[:19])
    with pytest.raises(ValueError, match="n_boot"):
        rate(gamma, gamma, n_boot=1)
    with pytest.raises(ValueError, match="weighting"):
        rate_point(gamma, gamma, "uplift")


def test_rate_bootstrap_reproducible():
    rng = philox("boot", 3)
    gamma = rng.standard_normal(100)
    scores = rng.standard_normal(100)
    r1 = rate(gamma, scores, n_boot=50, seed=9)
    r2 = rate(gamma, scores, n_boot=50, seed=9)
    assert r1 == r2
    r3 = rate(gamma, scores, n_boot=50, seed=10)
    assert r3.sd != r1.sd
    assert r1.point == rate_point(gamma, scores)
    assert r1.ratio == pytest.approx(r1.point / r1.sd)
    assert r1.n_eval == 100 and r1.n_boot == 50 and not r1.zero_variance


def test_rate_zero_variance():
    gamma = np.full(30, 2.0)
    scores = np.arange(30.0)
    rep = rate(gamma, scores, n_boot=20, seed=0)
    assert rep.point == 0.0
    assert rep.sd == 0.0
    assert rep.zero_variance
    assert np.isnan(rep.ratio)


def test_policy_gain_worked_examples():
    # n=2, both priorities positive
    gamma = np.array([10.0, 0.0])
    scores = np.array([1.0, 0.5])
    assert policy_gain(gamma, scores, 0.5) == 5.0
    assert policy_gain(gamma, scores, 1.0) == 5.0
    # negative-priority units are never treated
    gamma2 = np.array([10.0, 7.0])
    scores2 = np.array([1.0, -1.0])
    assert policy_gain(gamma2, scores2, 1.0) == 5.0
    # spend too small to treat anyone
    assert policy_gain(gamma, scores, 0.2) == 0.0


def test_policy_gain_floor_epsilon():
    # B*n hitting an integer boundary must not lose a unit to float error
    gamma = np.ones(10)
    scores = np.linspace(1.0, 0.1, 10)
    assert policy_gain(gamma, scores, 0.3) == pytest.approx(0.3)
    assert policy_gain(gamma, scores, 0.7) == pytest.approx(0.7)


def test_qini_curve_shapes_and_baseline():
    rng = philox("qini", 4)
    gamma = rng.standard_normal(40)
    scores = rng.standard_normal(40)
    q = qini_curve(gamma, scores, n_boot=30, seed=1)
    assert q.spend.shape == q.gain.shape == q.se.shape == q.baseline.shape == (40,)
    assert q.spend[0] == pytest.approx(1 / 40) and q.spend[-1] == 1.0
    np.testing.assert_allclose(q.baseline, q.spend * gamma.mean())
    assert np.all(q.se >= 0)
    q2 = qini_curve(gamma, scores, n_boot=30, seed=1)
    np.testing.assert_array_equal(q.gain, q2.gain)
    np.testing.assert_array_equal(q.se, q2.se)


def test_qini_constant_gamma_net_zero():
    # constant gamma, all-positive priorities: gain == baseline bit-exact
    n = 32
    gamma = np.full(n, 0.5)
    scores = np.linspace(2.0, 1.0, n)
    q = qini_curve(gamma, scores, n_boot=20, seed=0)
    np.testing.assert_array_equal(q.gain, q.baseline)


def test_qini_gain_endpoint():
    rng = philox("qini-end", 5)
    gamma = rng.standard_normal(50)
    scores = np.abs(rng.standard_normal(50)) + 0.1  # all positive
    q = qini_curve(gamma, scores, n_boot=20, seed=2)
    assert q.gain[-1] == pytest.approx(gamma.mean())
    # gain at each spend matches the policy_gain primitive
    for j in (0, 9, 24, 49):
        assert q.gain[j] == pytest.approx(policy_gain(gamma, scores, (j + 1) / 50))


def test_qini_errors():
    gamma = np.arange(25.0)
    with pytest.raises(TooFewUnits):
        qini_curve(gamma[:10], gamma[:10])
    with pytest.raises(ValueError, match="n_boot"):
        qini_curve(gamma, gamma, n_boot=1)
    with pytest.raises(DimMismatch):
        qini_curve(gamma, gamma[:-1])


# --- sample-split pipelines ---


def _pipeline_data(n=80, seed=0):
    bundle = make_bundle(width=48, height=48, seed=seed)
    rng = philox("pipe", seed)
    X = rng.standard_normal((n, 5))
    tau = 4.0 * (X[:, 0] > 0)
    w = rng.integers(0, 2, n)
    y = X[:, 1] + tau * w + 0.3 * rng.standard_normal(n)
    units = make_units(n, bundle, seed=seed, treatment=w, outcome=y)
    return units, X


PIPE_CFG = PipelineConfig(
    forest=ForestConfig(num_trees=40, nuisance_trees=30, seed=0),
    n_boot=40,
    seed=7,
)


def test_pipeline_deterministic():
    units, X = _pipeline_data()
    r1 = rate_ratio_pipeline(units, X, PIPE_CFG)
    r2 = rate_ratio_pipeline(units, X, PIPE_CFG)
    assert r1 == r2
    assert r1.n_eval == 40  # evaluation half
    r3 = rate_ratio_pipeline(units, X, PIPE_CFG.__class__(forest=PIPE_CFG.forest, n_boot=40, seed=8))
    assert r3 != r1


def test_pipeline_errors():
    units, X = _pipeline_data(n=30)
    with pytest.raises(TooFewUnits):
        rate_ratio_pipeline(units, X, PIPE_CFG)
    units2, X2 = _pipeline_data(n=80)
    with pytest.raises(DimMismatch):
        rate_ratio_pipeline(units2, X2[:-1], PIPE_CFG)
    with pytest.raises(TooFewUnits):
        qini_pipeline(units, X, PIPE_CFG)


def test_split_halves_partition():
    a, b = _split_halves(81, 3)
    assert a.shape == (40,) and b.shape == (41,)
    assert np.array_equal(np.sort(a), a) and np.array_equal(np.sort(b), b)
    together = np.sort(np.concatenate([a, b]))
    np.testing.assert_array_equal(together, np.arange(81))


def test_swap_halves_combination():
    units, X = _pipeline_data(n=80, seed=1)
    cfg = PipelineConfig(forest=PIPE_CFG.forest, n_boot=40, seed=7, swap_halves=True)
    combined = rate_ratio_pipeline(units, X, cfg)
    # reconstruct the two half reports with the documented derived seeds
    w = np.array([u.w for u in units])
    y = np.array([u.y for u in units])
    ids = np.array([u.id for u in units])
    a, b = _split_halves(80, cfg.seed)
    s_ab, rule_ab = _score_half(X, w, y, ids, a, b, cfg, "ab")
    rep_ab = rate(s_ab, rule_ab, n_boot=40, seed=derive_seed(cfg.seed, "boot", "ab"))
    s_ba, rule_ba = _score_half(X, w, y, ids, b, a, cfg, "ba")
    rep_ba = rate(s_ba, rule_ba, n_boot=40, seed=derive_seed(cfg.seed, "boot", "ba"))
    assert combined.point == pytest.approx(0.5 * (rep_ab.point + rep_ba.point), abs=1e-15)
    assert combined.sd == pytest.approx(0.5 * np.hypot(rep_ab.sd, rep_ba.sd), abs=1e-15)
    assert combined.n_eval == 80
    no_swap = rate_ratio_pipeline(units, X, PipelineConfig(forest=PIPE_CFG.forest, n_boot=40, seed=7))
    assert no_swap.point == rep_ab.point and no_swap.sd == rep_ab.sd


def test_pipeline_detects_signal():
    units, X = _pipeline_data(n=300, seed=2)
    cfg = PipelineConfig(forest=ForestConfig(num_trees=150, nuisance_trees=60), n_boot=100, seed=3)
    rep = rate_ratio_pipeline(units, X, cfg)
    assert rep.ratio > 1.96


def test_qini_pipeline_matches_half():
    units, X = _pipeline_data(n=80, seed=4)
    q = qini_pipeline(units, X, PIPE_CFG)
    assert q.n_eval == 40
    w = np.array([u.w for u in units])
    y = np.array([u.y for u in units])
    ids = np.array([u.id for u in units])
    a, b = _split_halves(80, PIPE_CFG.seed)
    s_ab, rule_ab = _score_half(X, w, y, ids, a, b, PIPE_CFG, "ab")
    q2 = qini_curve(s_ab, rule_ab, n_boot=40, seed=derive_seed(PIPE_CFG.seed, "boot", "ab"))
    np.testing.assert_array_equal(q.gain, q2.gain)
    np.testing.assert_array_equal(q.se, q2.se)
