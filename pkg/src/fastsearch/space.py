"""Static description of the multi-resolution search lattice.

Cells live at (layer, rate) positions.  Layer 0 exists only at the smallest
rate (it consumes the stem output); a cell at rate ``s`` in layer ``l`` has a
same-rate predecessor ``(l-1, s)`` and a half-rate predecessor ``(l-1, s/2)``
whenever those exist.  Each searched branch ends at one final rate in the last
layer; a genotype aggregates ``branches`` of them with distinct final rates.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import NamedTuple

SCHEMA_VERSION = 1

# Table-1 reference shape: 1x256x32x64, latencies in ms.
REFERENCE_SHAPE = (256, 256, 32, 64)
REFERENCE_MS = 0.15


@dataclass(frozen=True)
class OperatorSpec:
    kind: str
    relative_receptive_field: Fraction
    reference_ms: float
    convs: int
    zoomed: bool
    groups: int = 1
    searchable: bool = True

    @property
    def cost_factor(self) -> float:
        return self.reference_ms / REFERENCE_MS

    def params(self, c_in: int, c_out: int) -> int:
        """Weight count of the convolutions (bias-free)."""
        if self.kind == "skip":
            return 0
        k = 9
        first = k * c_in * c_out // self.groups
        return first + (self.convs - 1) * k * c_out * c_out

    def macs(self, c_in: int, c_out: int, h: int, w: int) -> int:
        """Multiply-accumulates at output size h x w (halved per side when zoomed)."""
        if self.kind == "skip":
            return 0
        if self.zoomed:
            h, w = h // 2, w // 2
        return self.params(c_in, c_out) * h * w


def _rf(x) -> Fraction:
    return Fraction(x)


OPERATORS: dict[str, OperatorSpec] = {
    "skip": OperatorSpec("skip", _rf(0), 0.01 * REFERENCE_MS, convs=0, zoomed=False),
    "conv3x3": OperatorSpec("conv3x3", _rf(1), 0.15, convs=1, zoomed=False),
    "conv3x3_x2": OperatorSpec("conv3x3_x2", _rf(Fraction(5, 3)), 0.30, convs=2, zoomed=False),
    "zoomed_conv": OperatorSpec("zoomed_conv", _rf(2), 0.09, convs=1, zoomed=True),
    "zoomed_conv_x2": OperatorSpec("zoomed_conv_x2", _rf(Fraction(10, 3)), 0.18, convs=2, zoomed=True),
    # analysed but not searchable
    "conv_group2": OperatorSpec("conv_group2", _rf(1), 0.13, convs=1, zoomed=False, groups=2, searchable=False),
    "conv_dilation2": OperatorSpec("conv_dilation2", _rf(2), 0.25, convs=1, zoomed=False, searchable=False),
}

DEFAULT_OPERATORS = ("skip", "conv3x3", "conv3x3_x2", "zoomed_conv", "zoomed_conv_x2")


def operator_metadata(kind: str) -> OperatorSpec:
    try:
        return OPERATORS[kind]
    except KeyError:
        raise KeyError(f"unknown operator kind {kind!r}") from None


class CellPosition(NamedTuple):
    layer: int
    rate: int


@dataclass(frozen=True)
class SearchSpaceConfig:
    layers: int = 16
    rates: tuple[int, ...] = (8, 16, 32)
    branches: int = 2
    operators: tuple[str, ...] = DEFAULT_OPERATORS
    ratios: tuple[int, ...] = (4, 6, 8, 10, 12)
    channel_scale: Fraction = Fraction(1, 8)

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(int(r) for r in self.rates))
        object.__setattr__(self, "operators", tuple(self.operators))
        object.__setattr__(self, "ratios", tuple(int(r) for r in self.ratios))
        object.__setattr__(self, "channel_scale", Fraction(self.channel_scale))

    def validate(self) -> None:
        if self.layers < 1:
            raise ValueError("layers must be positive")
        if not self.rates:
            raise ValueError("rates must be non-empty")
        base = self.rates[0]
        for i, r in enumerate(self.rates):
            if r != base * 2**i:
                raise ValueError(f"rates must double from {base}: got {self.rates}")
        if not 1 <= self.branches <= len(self.rates):
            raise ValueError(f"branches={self.branches} needs 1 <= b <= {len(self.rates)}")
        if self.layers < len(self.rates):
            raise ValueError(
                f"{self.layers} layers cannot reach rate {self.rates[-1]} from {self.rates[0]}"
            )
        if not self.operators:
            raise ValueError("operator set is empty")
        for op in self.operators:
            spec = operator_metadata(op)
            if not spec.searchable:
                raise ValueError(f"operator {op!r} is metadata-only")
        if len(set(self.operators)) != len(self.operators):
            raise ValueError("duplicate operators")
        if not self.ratios:
            raise ValueError("expansion ratio set is empty")
        if any(b <= a for a, b in zip(self.ratios, self.ratios[1:])) or self.ratios[0] <= 0:
            raise ValueError(f"ratios must be positive and strictly increasing: {self.ratios}")
        if self.channel_scale <= 0:
            raise ValueError("channel_scale must be positive")

    def to_json(self) -> str:
        doc = {
            "version": SCHEMA_VERSION,
            "layers": self.layers,
            "rates": list(self.rates),
            "branches": self.branches,
            "operators": list(self.operators),
            "ratios": list(self.ratios),
            "channel_scale": str(self.channel_scale),
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchSpaceConfig":
        if "version" not in doc:
            raise ValueError("search space config is missing the schema 'version' field")
        if doc["version"] != SCHEMA_VERSION:
            raise ValueError(f"unsupported search space schema version {doc['version']}")
        known = {"version", "layers", "rates", "branches", "operators", "ratios", "channel_scale"}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown search space keys: {sorted(extra)}")
        kwargs = {k: doc[k] for k in known - {"version"} if k in doc}
        if "channel_scale" in kwargs:
            kwargs["channel_scale"] = Fraction(str(kwargs["channel_scale"]))
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "SearchSpaceConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class StemSpec:
    """Five 3x3 convs, strides (2,2,1,2,1); semantic widths double at each stride-2."""

    layers: tuple[tuple[int, int, int], ...]  # (c_in, c_out, stride)

    @property
    def reduction(self) -> int:
        return math.prod(s for _, _, s in self.layers)

    @property
    def out_channels(self) -> int:
        return self.layers[-1][1]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        if h % self.reduction or w % self.reduction:
            raise ValueError(f"input {h}x{w} not divisible by {self.reduction}")
        return h // self.reduction, w // self.reduction


@dataclass(frozen=True)
class HeadSpec:
    """1x1 reduce of the coarse input, bilinear upsample, concat, 3x3 fuse, 1x1 classify."""

    reduce_channels: int
    fuse_channels: int


def make_stem(base: int, in_channels: int = 3) -> StemSpec:
    c1, c2, c3 = base // 4, base // 2, base
    return StemSpec(((in_channels, c1, 2), (c1, c2, 2), (c2, c2, 1), (c2, c3, 2), (c3, c3, 1)))


@dataclass(frozen=True)
class SearchSpace:
    config: SearchSpaceConfig
    cells: tuple[CellPosition, ...]
    edges: tuple[tuple[CellPosition, CellPosition, str], ...]
    stem_spec: StemSpec
    head_spec: HeadSpec
    _cellset: frozenset = field(default=frozenset(), repr=False, compare=False)

    # -- structure ---------------------------------------------------------
    @property
    def rates(self) -> tuple[int, ...]:
        return self.config.rates

    @property
    def layers(self) -> int:
        return self.config.layers

    def rate_index(self, rate: int) -> int:
        return self.config.rates.index(rate)

    def first_layer(self, rate: int) -> int:
        return self.rate_index(rate)

    def __contains__(self, pos) -> bool:
        return CellPosition(*pos) in self._cellset

    def predecessors(self, pos: CellPosition) -> dict[str, CellPosition]:
        """``{'half': ..., 'same': ...}`` restricted to existing cells."""
        l, s = pos
        out = {}
        if (l - 1, s // 2) in self._cellset and s // 2 in self.rates and s > self.rates[0]:
            out["half"] = CellPosition(l - 1, s // 2)
        if (l - 1, s) in self._cellset:
            out["same"] = CellPosition(l - 1, s)
        return out

    def successors(self, pos: CellPosition) -> dict[str, CellPosition]:
        l, s = pos
        out = {}
        if (l + 1, s) in self._cellset:
            out["same"] = CellPosition(l + 1, s)
        if (l + 1, 2 * s) in self._cellset:
            out["double"] = CellPosition(l + 1, 2 * s)
        return out

    def branch_cells(self, final_rate: int) -> tuple[CellPosition, ...]:
        """Cells lying on at least one path that ends at ``final_rate`` in the last layer."""
        last = self.layers - 1
        out = []
        for pos in self.cells:
            l, s = pos
            if s > final_rate:
                continue
            steps = int(math.log2(final_rate // s))
            if last - l >= steps:
                out.append(pos)
        return tuple(out)

    @cached_property
    def rate_combinations(self) -> tuple[tuple[int, ...], ...]:
        return tuple(itertools.combinations(self.rates, self.config.branches))

    # -- widths ------------------------------------------------------------
    def semantic_width(self, rate: int, ratio: int) -> int:
        return rate * ratio

    def width(self, rate: int, ratio: int) -> int:
        """Concrete channel count at desk scale."""
        w = Fraction(rate * ratio) * self.config.channel_scale
        return max(1, int(w))

    def concrete(self, semantic_channels: int) -> int:
        return max(1, int(Fraction(semantic_channels) * self.config.channel_scale))

    def max_width(self, rate: int) -> int:
        return self.width(rate, self.config.ratios[-1])


def build_search_space(config: SearchSpaceConfig) -> SearchSpace:
    config.validate()
    rates = config.rates
    cells = []
    for l in range(config.layers):
        for k, s in enumerate(rates):
            if l >= k:
                cells.append(CellPosition(l, s))
    cellset = frozenset(cells)
    edges = []
    for l, s in cells:
        if (l - 1, s) in cellset:
            edges.append((CellPosition(l - 1, s), CellPosition(l, s), "same"))
        if s > rates[0] and (l - 1, s // 2) in cellset:
            edges.append((CellPosition(l - 1, s // 2), CellPosition(l, s), "stride2"))
    base = 16 * rates[0]
    stem = make_stem(base)
    head = HeadSpec(reduce_channels=base, fuse_channels=base)
    return SearchSpace(config, tuple(cells), tuple(edges), stem, head, cellset)


# -- counting -------------------------------------------------------------
def enumerate_paths(space: SearchSpace, final_rate: int) -> list[tuple[int, ...]]:
    """All single-branch paths ending at ``final_rate``, as sorted downsample layers.

    A downsample layer ``l`` means the cell in layer ``l`` is the first one at
    the doubled rate.
    """
    hops = space.rate_index(final_rate)
    return [c for c in itertools.combinations(range(1, space.layers), hops)]


def _degenerate(p: tuple[int, ...], q: tuple[int, ...]) -> bool:
    lo, hi = (p, q) if len(p) <= len(q) else (q, p)
    return len(lo) > 0 and hi[: len(lo)] == lo


def branch_path_counts(space: SearchSpace) -> dict[str, int]:
    """Exact counts of branch-path combinations, by explicit enumeration.

    ``inclusive`` counts every combination of per-branch paths with distinct
    final rates; ``exclusive`` drops combinations where a lower branch's
    downsample positions all coincide with the start of a higher branch's.
    """
    paths = {r: enumerate_paths(space, r) for r in space.rates}
    inclusive = exclusive = 0
    for combo in space.rate_combinations:
        for choice in itertools.product(*(paths[r] for r in combo)):
            inclusive += 1
            if not any(_degenerate(a, b) for a, b in itertools.combinations(choice, 2)):
                exclusive += 1
    return {"inclusive": inclusive, "exclusive": exclusive}


def count_branch_paths(space: SearchSpace) -> int:
    return branch_path_counts(space)["inclusive"]


def cardinality_exponent(space: SearchSpace) -> int:
    """Number of cells carrying an operator/width choice: each rate row minus its first cell."""
    return sum(sum(1 for c in space.cells if c.rate == r) - 1 for r in space.rates)


def choices_per_cell(config: SearchSpaceConfig) -> int:
    """Skip carries no width; every other operator pairs with every ratio."""
    n_skip = sum(1 for op in config.operators if op == "skip")
    return n_skip + (len(config.operators) - n_skip) * len(config.ratios)


def log10_space_cardinality(space: SearchSpace, with_paths: bool = False) -> float:
    """log10 of the operator/width combination count, evaluated in log space."""
    value = cardinality_exponent(space) * math.log10(choices_per_cell(space.config))
    if with_paths:
        value += math.log10(count_branch_paths(space))
    return value


def rates_path(downsample_layers: tuple[int, ...], layers: int, base_rate: int) -> list[int]:
    """Per-layer rate sequence for a branch given its downsample layers."""
    out, rate, hops = [], base_rate, set(downsample_layers)
    for l in range(layers):
        if l in hops:
            rate *= 2
        out.append(rate)
    return out

