"""Decoding continuous architecture logits into discrete genotypes, and branch selection."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .arch import ArchParams
from .genotype import BranchSpec, CellSpec, Genotype, cell_transitions, shared_prefix_length
from .latency import LatencyTable
from .space import SearchSpace


@dataclass(frozen=True)
class BranchSelectConfig:
    target_ms: float = 8.3
    alpha_sel: float = -0.07
    beta_sel: float = -0.07

    def __post_init__(self):
        if not self.target_ms > 0:
            raise ValueError("target latency must be positive")


@dataclass(frozen=True)
class Candidate:
    genotype: Genotype
    acc: float
    lat: float


def downsample_layers(beta0: np.ndarray, space: SearchSpace, hops: int) -> tuple[int, ...]:
    """Layers at which a branch doubles its rate.

    ``beta0[l, r]`` is the probability of entering rate index ``r`` at layer ``l``
    from the half rate.  The product over hops is maximised jointly over
    strictly increasing layers; ties go to the lexicographically smallest tuple.
    """
    if hops == 0:
        return ()
    rates = space.rates
    best, best_score = None, -np.inf
    for combo in itertools.combinations(range(1, space.layers), hops):
        if any((l, rates[j + 1]) not in space for j, l in enumerate(combo)):
            continue
        score = float(np.prod([beta0[l, j + 1] for j, l in enumerate(combo)]))
        if score > best_score:
            best, best_score = combo, score
    if best is None:
        raise ValueError(f"no feasible placement for {hops} downsamples in {space.layers} layers")
    return best


def derive_branch(params: ArchParams, final_rate: int) -> BranchSpec:
    space = params.space
    cfg = space.config
    b = space.rate_index(final_rate)
    beta0 = params.raw_beta_probs()[b, :, :, 0]
    hops = set(downsample_layers(beta0, space, b))
    alpha = params.alpha.data[b]
    gamma = params.gamma_probs().data[b]
    skip = cfg.operators.index("skip") if "skip" in cfg.operators else None
    first_hop = min(hops, default=space.layers)
    cells, r = [], 0
    for l in range(space.layers):
        stride2 = l in hops
        if stride2:
            r += 1
        scores = alpha[l, r].copy()
        if stride2 and skip is not None:
            scores[skip] = -np.inf  # a downsampling cell cannot be shrunk away
        if l == first_hop - 1 and not cells and skip is not None:
            scores[skip] = -np.inf  # keep one base-rate cell so the first downsample is not cell 0
        op = cfg.operators[int(np.argmax(scores))]
        if op == "skip":
            continue
        cells.append(CellSpec(op, space.rates[r], cfg.ratios[int(np.argmax(gamma[l, r]))]))
    return BranchSpec(final_rate, tuple(cells))


def derive_genotype(params: ArchParams, space: SearchSpace, final_rates) -> Genotype:
    """Argmax decoding of one branch per final rate, with skip cells removed."""
    final_rates = tuple(int(f) for f in final_rates)
    if len(set(final_rates)) != len(final_rates):
        raise ValueError(f"final rates must be distinct, got {final_rates}")
    for f in final_rates:
        if f not in space.rates:
            raise ValueError(f"final rate {f} not in space rates {space.rates}")
    if params.space.config != space.config:
        raise ValueError("parameters belong to a different search space")
    branches = tuple(derive_branch(params, f) for f in sorted(final_rates))
    return merge_shared_prefix(Genotype(branches, provenance=params.digest()))


def merge_shared_prefix(genotype: Genotype) -> Genotype:
    """Mark the longest common leading run of identical cells as shared."""
    if len(genotype.branches) != 2:
        return replace(genotype, shared_prefix_len=0)
    return replace(genotype, shared_prefix_len=shared_prefix_length(*genotype.branches))


def target_score(acc: float, lat: float, cfg: BranchSelectConfig) -> float:
    """ACC * (LAT / T) ** w with w chosen by which side of T the latency falls."""
    if not 0 < acc <= 1:
        raise ValueError(f"accuracy must lie in (0, 1], got {acc}")
    if not lat > 0:
        raise ValueError(f"latency must be positive, got {lat}")
    w = cfg.alpha_sel if lat <= cfg.target_ms else cfg.beta_sel
    return acc * (lat / cfg.target_ms) ** w


def branch_targets(candidates, cfg: BranchSelectConfig) -> list[float]:
    return [target_score(c.acc, c.lat, cfg) for c in map(_candidate, candidates)]


def select_branches(candidates, cfg: BranchSelectConfig = BranchSelectConfig()) -> Genotype:
    """Highest target score; equal scores go to the lower latency, then the earlier candidate."""
    cands = [_candidate(c) for c in candidates]
    if not cands:
        raise ValueError("no candidates to select from")
    scores = branch_targets(cands, cfg)
    best = min(range(len(cands)), key=lambda i: (-scores[i], cands[i].lat, i))
    return cands[best].genotype


def _candidate(c) -> Candidate:
    return c if isinstance(c, Candidate) else Candidate(*c)


def validate_genotype(genotype: Genotype, space: SearchSpace, lut: LatencyTable | None = None) -> list[str]:
    """Every invariant violation found, as readable strings; empty means valid."""
    cfg = space.config
    problems: list[str] = []
    finals = [b.final_rate for b in genotype.branches]
    if not genotype.branches:
        problems.append("genotype has no branches")
    if len(set(finals)) != len(finals):
        problems.append(f"branch final rates are not distinct: {finals}")
    for bi, branch in enumerate(genotype.branches):
        where = f"branch {bi} (final rate {branch.final_rate})"
        if branch.final_rate not in space.rates:
            problems.append(f"{where}: final rate not in {space.rates}")
        if len(branch.cells) > space.layers:
            problems.append(f"{where}: {len(branch.cells)} cells exceed {space.layers} layers")
        prev = space.rates[0]
        for i, c in enumerate(branch.cells):
            at = f"{where} cell {i}"
            if c.op not in cfg.operators:
                problems.append(f"{at}: unknown operator {c.op!r}")
            elif c.op == "skip":
                problems.append(f"{at}: skip cells must be shrunk")
            if c.chi not in cfg.ratios:
                problems.append(f"{at}: ratio {c.chi} not in {cfg.ratios}")
            if c.s not in space.rates:
                problems.append(f"{at}: rate {c.s} not in {space.rates}")
            if c.s not in (prev, 2 * prev):
                problems.append(f"{at}: rate steps from {prev} to {c.s}; only x1 or x2 allowed")
            elif (i, c.s) not in space:
                problems.append(f"{at}: position ({i}, {c.s}) is outside the lattice")
            prev = c.s
        if prev != branch.final_rate:
            problems.append(f"{where}: cells end at rate {prev}")
        if lut is not None and not problems:
            for i, (c, t) in enumerate(zip(branch.cells, cell_transitions(branch, space.rates[0]))):
                if (i, c.s, c.op, c.chi, t) not in lut.entries:
                    problems.append(f"{where} cell {i}: no latency entry for {(i, c.s, c.op, c.chi, t)}")
    if len(genotype.branches) == 2:
        common = shared_prefix_length(*genotype.branches)
        if not 0 <= genotype.shared_prefix_len <= common:
            problems.append(f"shared prefix {genotype.shared_prefix_len} exceeds common prefix {common}")
    elif genotype.shared_prefix_len:
        problems.append("shared prefix is only defined for two branches")
    if lut is not None and not problems and tuple(finals) not in lut.head_ms:
        problems.append(f"no head latency entry for rates {tuple(finals)}")
    return problems

