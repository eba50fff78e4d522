import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from genotypes import random_genotype
from hypothesis import given, strategies as st

from fastsearch.arch import init_uniform, one_hot_from
from fastsearch.derivation import (
    BranchSelectConfig,
    Candidate,
    derive_branch,
    derive_genotype,
    downsample_layers,
    merge_shared_prefix,
    select_branches,
    target_score,
    validate_genotype,
)
from fastsearch.genotype import BranchSpec, CellSpec, Genotype


def test_fasterseg_fixture_validates(space, lut, fasterseg):
    assert validate_genotype(fasterseg, space, lut) == []
    outs = {c.c_out for b in fasterseg.branches for c in b.cells}
    assert 192 in outs
    assert all(c.c_out == c.s * c.chi for b in fasterseg.branches for c in b.cells)


def test_fasterseg_shares_three_cells(fasterseg):
    merged = merge_shared_prefix(replace(fasterseg, shared_prefix_len=0))
    assert merged.shared_prefix_len == 3
    assert merge_shared_prefix(merged) == merged


def test_fasterseg_round_trips_through_one_hot(space, fasterseg):
    back = derive_genotype(one_hot_from(fasterseg, space), space, fasterseg.head_rates)
    assert back == fasterseg
    assert Genotype.from_json(back.to_json()) == back


def test_random_genotypes_round_trip(space):
    rng = np.random.default_rng(1)
    for _ in range(50):
        g = random_genotype(space, rng)
        assert derive_genotype(one_hot_from(g, space), space, g.head_rates) == g


def test_downsample_ties_pick_earliest(small_space):
    beta0 = np.full((small_space.layers, 3), 0.5)
    assert downsample_layers(beta0, small_space, 1) == (1,)
    assert downsample_layers(beta0, small_space, 2) == (1, 2)
    assert downsample_layers(beta0, small_space, 0) == ()


def test_downsample_matches_brute_force(small_space):
    rng = np.random.default_rng(2)
    L = small_space.layers
    for _ in range(30):
        beta0 = rng.uniform(size=(L, 3))
        for hops in (1, 2):
            feasible = [c for c in itertools.combinations(range(1, L), hops)
                        if all((l, small_space.rates[j + 1]) in small_space for j, l in enumerate(c))]
            best = max(feasible, key=lambda c: math.prod(beta0[l, j + 1] for j, l in enumerate(c)))
            assert downsample_layers(beta0, small_space, hops) == best


def test_derive_never_shrinks_a_downsampling_cell(small_space):
    p = init_uniform(small_space)
    skip = small_space.config.operators.index("skip")
    p.alpha.data[..., skip] = 50.0
    branch = derive_branch(p, 32)
    assert [c.s for c in branch.cells] == [8, 16, 32]


@given(st.integers(0, 10_000), st.floats(0.5, 8.0))
def test_derived_genotypes_always_validate(small_space, small_lut, seed, jitter):
    p = init_uniform(small_space, seed=seed, jitter=jitter)
    skip = small_space.config.operators.index("skip")
    p.alpha.data[..., skip] += jitter  # favour shrinking
    for pair in small_space.rate_combinations:
        g = derive_genotype(p, small_space, pair)
        assert validate_genotype(g, small_space, small_lut) == []


def test_leading_skips_keep_one_base_rate_cell(small_space):
    p = init_uniform(small_space)
    p.alpha.data[..., small_space.config.operators.index("skip")] = 50.0
    p.beta.data[:, 1, 1] = (50.0, -50.0)  # downsample at layer 1
    branch = derive_branch(p, 16)
    assert [c.s for c in branch.cells] == [8, 16]


def test_derive_rejects_bad_rates(small_space):
    p = init_uniform(small_space)
    with pytest.raises(ValueError, match="distinct"):
        derive_genotype(p, small_space, (8, 8))
    with pytest.raises(ValueError, match="not in space"):
        derive_genotype(p, small_space, (8, 64))


def test_target_closed_forms():
    cfg = BranchSelectConfig(target_ms=8.3)
    assert abs(target_score(0.7, 8.3, cfg) - 0.7) < 1e-6
    assert abs(target_score(0.7, 16.6, cfg) - 0.7 * 2**-0.07) < 1e-6
    with pytest.raises(ValueError):
        target_score(0.0, 1.0, cfg)
    with pytest.raises(ValueError):
        target_score(0.5, 0.0, cfg)


@given(st.lists(st.tuples(st.floats(0.05, 1.0), st.floats(0.5, 50.0)), min_size=1, max_size=6),
       st.floats(0.1, 10.0))
def test_selection_invariant_to_uniform_latency_scaling(pairs, k):
    cfg = BranchSelectConfig(alpha_sel=-0.07, beta_sel=-0.07)
    cands = [Candidate(i, a, l) for i, (a, l) in enumerate(pairs)]
    scaled = [Candidate(c.genotype, c.acc, c.lat * k) for c in cands]
    scores = [target_score(c.acc, c.lat, cfg) for c in cands]
    top = sorted(scores, reverse=True)
    if len(top) > 1 and top[0] - top[1] < 1e-9 * top[0]:
        return  # near-ties can flip under rounding
    assert select_branches(cands, cfg) == select_branches(scaled, cfg)


def test_selection_ties_prefer_lower_latency_then_order():
    cfg = BranchSelectConfig(target_ms=10.0, alpha_sel=0.0, beta_sel=0.0)
    assert select_branches([("a", 0.5, 9.0), ("b", 0.5, 4.0)], cfg) == "b"
    assert select_branches([("a", 0.5, 4.0), ("b", 0.5, 4.0)], cfg) == "a"
    with pytest.raises(ValueError):
        select_branches([], cfg)


def test_violations_are_reported(space):
    bad_skip = Genotype((BranchSpec(32, (CellSpec("conv3x3", 8, 4), CellSpec("skip", 16, 4),
                                          CellSpec("conv3x3", 32, 4))),))
    assert any("skip" in p for p in validate_genotype(bad_skip, space))
    bad_chi = Genotype((BranchSpec(8, (CellSpec("conv3x3", 8, 5),)),))
    assert any("ratio 5" in p for p in validate_genotype(bad_chi, space))
    jump = Genotype((BranchSpec(32, (CellSpec("conv3x3", 8, 4), CellSpec("conv3x3", 32, 4))),))
    assert any("x1 or x2" in p for p in validate_genotype(jump, space))
    short = Genotype((BranchSpec(16, (CellSpec("conv3x3", 8, 4),)),))
    assert any("end at rate 8" in p for p in validate_genotype(short, space))
    early = Genotype((BranchSpec(16, (CellSpec("conv3x3", 16, 4),)),))
    assert any("outside the lattice" in p for p in validate_genotype(early, space))


def test_overlong_shared_prefix_is_reported(space, fasterseg):
    assert any("shared prefix" in p for p in validate_genotype(replace(fasterseg, shared_prefix_len=5), space))


def test_channel_mismatch_rejected_on_load(fasterseg):
    doc = fasterseg.to_dict()
    doc["branches"][0]["cells"][0]["c_out"] = 999
    with pytest.raises(ValueError, match="c_out"):
        Genotype.from_dict(doc)
