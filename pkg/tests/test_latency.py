import numpy as np
import pytest
from genotypes import random_genotype
from hypothesis import given, strategies as st

from fastsearch.arch import init_uniform, one_hot_from
from fastsearch.derivation import validate_genotype
from fastsearch.latency import (
    CostModel,
    RegularizerWeights,
    SensitivityReport,
    build_lut,
    decoupled_latency,
    estimate_discrete,
    estimate_relaxed,
    measured_latency,
    read_lut_csv,
    sensitivity_report,
    solve_regularizer_weights,
)
from fastsearch.numerics import finite_diff_check
from fastsearch.space import REFERENCE_SHAPE


@pytest.mark.parametrize("kind,ms", [("conv3x3", 0.15), ("conv_group2", 0.13),
                                     ("conv_dilation2", 0.25), ("zoomed_conv", 0.09)])
def test_table_one_anchor_at_reference_shape(kind, ms):
    c_in, c_out, h, w = REFERENCE_SHAPE
    assert CostModel().op_ms(kind, c_in, c_out, h, w) == ms


def test_same_rate_skip_is_free():
    assert CostModel().op_ms("skip", 64, 64, 32, 64) == 0.0
    assert CostModel().op_ms("skip", 64, 128, 32, 64, stride=2) > 0.0


def test_solver_reproduces_footnote_weights():
    w = solve_regularizer_weights(SensitivityReport(10.42, 0.01, 5.54))
    assert tuple(round(x, 3) for x in w.as_tuple()) == (0.001, 0.997, 0.002)
    prods = [d * x for d, x in zip((10.42, 0.01, 5.54), w.as_tuple())]
    assert max(prods) - min(prods) < 1e-9
    assert abs(sum(w.as_tuple()) - 1.0) < 1e-12


@given(st.tuples(*[st.floats(1e-3, 1e3)] * 3))
def test_solver_balances_any_positive_gaps(deltas):
    w = solve_regularizer_weights(SensitivityReport(*deltas))
    prods = np.array(deltas) * np.array(w.as_tuple())
    assert np.ptp(prods) <= 1e-9 * prods.max()
    assert sum(w.as_tuple()) == pytest.approx(1.0, abs=1e-12)


def test_solver_equal_gaps_and_errors():
    w = solve_regularizer_weights(SensitivityReport(1, 1, 1))
    assert w.as_tuple() == pytest.approx((1 / 3,) * 3)
    with pytest.raises(ValueError):
        solve_regularizer_weights(SensitivityReport(1, 0, 1))
    with pytest.raises(ValueError):
        RegularizerWeights(0.5, 0.5, 0.5)


def test_one_hot_consistency_on_random_genotypes(space, lut):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(500):
        g = random_genotype(space, rng)
        assert validate_genotype(g, space, lut) == []
        disc = estimate_discrete(g, lut)
        rel = estimate_relaxed(one_hot_from(g, space), lut, pair=g.head_rates).item()
        worst = max(worst, abs(rel - disc) / disc)
    assert worst < 1e-9


def test_fasterseg_relaxed_equals_discrete(space, lut, fasterseg):
    disc = estimate_discrete(fasterseg, lut)
    rel = estimate_relaxed(one_hot_from(fasterseg, space), lut, pair=fasterseg.head_rates).item()
    assert abs(rel - disc) / disc < 1e-12


def test_shared_prefix_is_counted_once(space, lut, fasterseg):
    unshared = fasterseg.__class__(fasterseg.branches, 0)
    saved = estimate_discrete(unshared, lut) - estimate_discrete(fasterseg, lut)
    b = fasterseg.branches[1]
    first = [lut[(i, c.s, c.op, c.chi, "same")] for i, c in enumerate(b.cells[:3])]
    assert saved == pytest.approx(sum(first))


def test_decoupled_forward_equals_relaxed(small_space, small_lut):
    p = init_uniform(small_space, seed=1, jitter=1.0)
    rel = estimate_relaxed(p, small_lut).item()
    for w in (RegularizerWeights.default(), RegularizerWeights.uniform()):
        assert decoupled_latency(p, small_lut, w).item() == rel


@pytest.mark.parametrize("family,index", [("alpha", 0), ("beta", 1), ("gamma", 2)])
def test_decoupled_gradient_is_weighted_family_gradient(small_space, small_lut, family, index):
    p = init_uniform(small_space, seed=2, jitter=1.0)
    w = RegularizerWeights(0.2, 0.3, 0.5)
    leaf = getattr(p, family)
    decoupled_latency(p, small_lut, w).backward()
    got = leaf.grad.copy()
    p.zero_grad()
    estimate_relaxed(p, small_lut).backward()
    np.testing.assert_allclose(got, w.as_tuple()[index] * leaf.grad, rtol=1e-10, atol=1e-15)
    flat = leaf.data.reshape(-1)
    for j in np.random.default_rng(0).choice(flat.size, 20, replace=False):
        keep = flat[j]
        flat[j] = keep + 1e-6
        hi = estimate_relaxed(p, small_lut).item()
        flat[j] = keep - 1e-6
        lo = estimate_relaxed(p, small_lut).item()
        flat[j] = keep
        numeric = w.as_tuple()[index] * (hi - lo) / 2e-6
        assert got.reshape(-1)[j] == pytest.approx(numeric, rel=1e-4, abs=1e-9)


def test_relaxed_latency_gradient(small_space, small_lut):
    p = init_uniform(small_space, seed=3, jitter=1.0)
    assert finite_diff_check(lambda: estimate_relaxed(p, small_lut), [p.alpha, p.beta, p.gamma]) < 1e-3


def test_lut_csv_round_trip_and_measured_mode(small_space, small_lut):
    table = read_lut_csv(small_lut.to_csv())
    again = build_lut(small_space, CostModel("measured", measured=table))
    assert again.entries == small_lut.entries
    assert again.head_ms == small_lut.head_ms and again.stem_ms == small_lut.stem_ms
    del table["cells"][next(iter(table["cells"]))]
    with pytest.raises(LookupError, match="missing 1 entries"):
        build_lut(small_space, CostModel("measured", measured=table))


def test_sensitivity_gaps_rank_resolution_lowest(space, lut):
    rep = sensitivity_report(space, lut)
    assert rep.delta_s < rep.delta_chi < rep.delta_O


def test_lut_estimate_tracks_noisy_measurement(space, lut):
    rng = np.random.default_rng(4)
    gs = [random_genotype(space, rng) for _ in range(60)]
    est = [estimate_discrete(g, lut) for g in gs]
    meas = [measured_latency(g, space, CostModel(), noise=0.02, rng=rng) for g in gs]
    assert np.corrcoef(est, meas)[0, 1] > 0.95
