"""Random valid genotypes for property tests."""
import numpy as np

from fastsearch.derivation import merge_shared_prefix
from fastsearch.genotype import BranchSpec, CellSpec, Genotype
from fastsearch.space import SearchSpace


def random_branch(space: SearchSpace, final_rate: int, rng: np.random.Generator,
                  ops=None, n_cells: int | None = None) -> BranchSpec:
    """Cells occupy layers 0..n-1; downsamples land on distinct layers >= 1."""
    cfg = space.config
    ops = ops or [op for op in cfg.operators if op != "skip"]
    hops = space.rate_index(final_rate)
    n = n_cells if n_cells is not None else int(rng.integers(hops + 1, space.layers + 1))
    down = set(rng.choice(np.arange(1, n), size=hops, replace=False).tolist()) if hops else set()
    rate, cells = space.rates[0], []
    for i in range(n):
        if i in down:
            rate *= 2
        cells.append(CellSpec(str(rng.choice(ops)), rate, int(rng.choice(cfg.ratios))))
    return BranchSpec(final_rate, tuple(cells))


def random_genotype(space: SearchSpace, rng: np.random.Generator, share: bool = True, **kw) -> Genotype:
    combo = space.rate_combinations[int(rng.integers(len(space.rate_combinations)))]
    branches = [random_branch(space, f, rng, **kw) for f in combo]
    if share and len(branches) == 2:
        a, b = branches
        k = int(rng.integers(0, min(len(a.cells), len(b.cells)) + 1))
        prefix = a.cells[:k]
        # keep b valid: copy only cells whose rate equals b's own rate at that index
        k = next((i for i in range(k) if prefix[i].s != b.cells[i].s), k)
        branches[1] = BranchSpec(b.final_rate, a.cells[:k] + b.cells[k:])
    return merge_shared_prefix(Genotype(tuple(branches)))
