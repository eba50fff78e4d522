"""Latency lookup table, relaxed/discrete latency estimates and the decoupled regularizer.

Cell entries are keyed ``(layer, rate, operator, ratio, transition)``.  A cell
at rate ``s`` with ratio ``chi`` has ``s*chi`` output channels and
``s_in*chi`` input channels, where ``s_in`` is ``s`` for a same-rate input and
``s/2`` for a stride-2 input; layer 0 reads the stem output instead.  A
same-rate skip is an identity and costs nothing.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch import ArchParams, init_uniform
from .genotype import Genotype, cell_transitions
from .numerics.tensor import Tensor, add_n, einsum, mul, stack, stop_gradient, tsum
from .space import REFERENCE_SHAPE, SearchSpace, operator_metadata

TRANSITIONS = ("stride2", "same")  # index order matches beta (0 = half-rate input)
REFERENCE_VOLUME = math.prod(REFERENCE_SHAPE)
POINTWISE_FACTOR = 1.0 / 9.0  # a 1x1 conv relative to a 3x3 conv

DEFAULT_WEIGHTS = (0.001, 0.997, 0.002)


@dataclass(frozen=True)
class CostModel:
    """Synthetic law ``ref_ms * (c_in*c_out*H*W) / reference_volume`` or a measured table."""

    mode: str = "synthetic"
    input_size: tuple[int, int] = (1024, 2048)
    measured: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.mode not in ("synthetic", "measured"):
            raise ValueError(f"unknown cost model mode {self.mode!r}")
        if self.mode == "measured" and self.measured is None:
            raise ValueError("measured mode needs a table of timings")

    def op_ms(self, kind: str, c_in: int, c_out: int, h: int, w: int, stride: int = 1) -> float:
        if kind == "skip" and stride == 1:
            return 0.0
        spec = operator_metadata(kind)
        return spec.reference_ms * (c_in * c_out * h * w) / REFERENCE_VOLUME

    def conv_ms(self, c_in: int, c_out: int, h: int, w: int, k: int = 3) -> float:
        factor = 1.0 if k == 3 else POINTWISE_FACTOR
        return factor * self.op_ms("conv3x3", c_in, c_out, h, w)

    def spatial(self, rate: int) -> tuple[int, int]:
        return self.input_size[0] // rate, self.input_size[1] // rate


def cell_transitions_at(space: SearchSpace, layer: int, rate: int) -> tuple[str, ...]:
    """Input transitions that can feed the cell at (layer, rate)."""
    if layer == 0:
        return ("same",)
    preds = space.predecessors((layer, rate))
    return tuple(t for t, key in (("stride2", "half"), ("same", "same")) if key in preds)


def stem_latency(space: SearchSpace, cost: CostModel) -> float:
    h, w = cost.input_size
    total = 0.0
    for c_in, c_out, stride in space.stem_spec.layers:
        h, w = h // stride, w // stride
        total += cost.conv_ms(c_in, c_out, h, w)
    return total


def head_latency(space: SearchSpace, cost: CostModel, rates: tuple[int, ...]) -> float:
    """Nominal-width head cost for one final-rate combination (widest ratio)."""
    chi = space.config.ratios[-1]
    base = space.head_spec.fuse_channels
    hi = min(rates)
    h, w = cost.spatial(hi)
    total = 0.0
    fuse_in = hi * chi
    if len(rates) > 1:
        lo = max(rates)
        hl, wl = cost.spatial(lo)
        total += cost.conv_ms(lo * chi, space.head_spec.reduce_channels, hl, wl, k=1)
        fuse_in += space.head_spec.reduce_channels
    total += cost.conv_ms(fuse_in, base, h, w)
    total += cost.conv_ms(base, 19, h, w, k=1)
    return total


@dataclass
class LatencyTable:
    space: SearchSpace
    entries: dict[tuple, float]
    stem_ms: float
    head_ms: dict[tuple[int, ...], float]
    dense: np.ndarray = field(init=False, repr=False)  # (L, R, |O|, |X|, 2)

    def __post_init__(self):
        cfg = self.space.config
        shape = (self.space.layers, len(self.space.rates), len(cfg.operators), len(cfg.ratios), 2)
        self.dense = np.zeros(shape)
        for (l, s, op, chi, t), ms in self.entries.items():
            self.dense[l, self.space.rate_index(s), cfg.operators.index(op),
                       cfg.ratios.index(chi), TRANSITIONS.index(t)] = ms

    def __getitem__(self, key) -> float:
        return self.entries[tuple(key)]

    def head(self, rates) -> float:
        return self.head_ms[tuple(sorted(rates))]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["layer", "rate", "operator", "ratio", "transition", "latency_ms"])
        wr.writerow([-1, self.space.rates[0], "stem", 0, "stem", repr(self.stem_ms)])
        for rates, ms in sorted(self.head_ms.items()):
            wr.writerow([-1, "|".join(map(str, rates)), "head", 0, "head", repr(ms)])
        for key in sorted(self.entries, key=_entry_order(self.space)):
            l, s, op, chi, t = key
            wr.writerow([l, s, op, chi, t, repr(self.entries[key])])
        return buf.getvalue()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path


def _entry_order(space: SearchSpace):
    ops = space.config.operators

    def key(k):
        l, s, op, chi, t = k
        return (l, s, ops.index(op), chi, TRANSITIONS.index(t))

    return key


def read_lut_csv(text: str) -> dict:
    """Parse the CSV form into ``{'cells': {...}, 'stem': ms, 'head': {...}}``."""
    out: dict = {"cells": {}, "stem": None, "head": {}}
    for row in csv.DictReader(io.StringIO(text)):
        ms = float(row["latency_ms"])
        if row["operator"] == "stem":
            out["stem"] = ms
        elif row["operator"] == "head":
            out["head"][tuple(int(r) for r in row["rate"].split("|"))] = ms
        else:
            key = (int(row["layer"]), int(row["rate"]), row["operator"], int(row["ratio"]), row["transition"])
            out["cells"][key] = ms
    return out


def required_keys(space: SearchSpace) -> list[tuple]:
    keys = []
    for l, s in space.cells:
        for t in cell_transitions_at(space, l, s):
            for op in space.config.operators:
                for chi in space.config.ratios:
                    keys.append((l, s, op, chi, t))
    return keys


def head_keys(space: SearchSpace) -> list[tuple[int, ...]]:
    return [tuple(c) for c in space.rate_combinations]


def build_lut(space: SearchSpace, cost: CostModel) -> LatencyTable:
    """Latency for every reachable (position, operator, ratio, transition), plus stem and head."""
    if cost.mode == "measured":
        table = cost.measured
        cells = table.get("cells", {})
        gaps = [k for k in required_keys(space) if k not in cells]
        gaps += [("head",) + k for k in head_keys(space) if k not in table.get("head", {})]
        if table.get("stem") is None:
            gaps.append(("stem",))
        if gaps:
            shown = ", ".join(map(str, gaps[:20]))
            more = f" (+{len(gaps) - 20} more)" if len(gaps) > 20 else ""
            raise LookupError(f"measured latency table is missing {len(gaps)} entries: {shown}{more}")
        entries = {k: float(cells[k]) for k in required_keys(space)}
        head = {k: float(table["head"][k]) for k in head_keys(space)}
        return LatencyTable(space, entries, float(table["stem"]), head)

    stem_c = space.stem_spec.out_channels
    entries = {}
    for l, s, op, chi, t in required_keys(space):
        h, w = cost.spatial(s)
        c_out = s * chi
        if l == 0:
            c_in = stem_c
        else:
            c_in = (s // 2 if t == "stride2" else s) * chi
        entries[(l, s, op, chi, t)] = cost.op_ms(op, c_in, c_out, h, w, stride=2 if t == "stride2" else 1)
    head = {k: head_latency(space, cost, k) for k in head_keys(space)}
    return LatencyTable(space, entries, stem_latency(space, cost), head)


# -- discrete ---------------------------------------------------------------
def estimate_discrete(genotype: Genotype, lut: LatencyTable) -> float:
    """Stem + head + every cell, shared-prefix cells counted once."""
    base = lut.space.rates[0]
    total = lut.stem_ms + lut.head(genotype.head_rates)
    for b, branch in enumerate(genotype.branches):
        trans = cell_transitions(branch, base)
        start = genotype.shared_prefix_len if b > 0 else 0
        for i in range(start, len(branch.cells)):
            c = branch.cells[i]
            total += lut[(i, c.s, c.op, c.chi, trans[i])]
    return total


def measured_latency(genotype: Genotype, space: SearchSpace, cost: CostModel,
                     noise: float = 0.0, rng: np.random.Generator | None = None) -> float:
    """A stand-in hardware timing: true input widths and multiplicative noise per layer."""
    rng = rng or np.random.default_rng(0)

    def jitter(ms: float) -> float:
        return ms * (1.0 + noise * rng.standard_normal()) if noise else ms

    total = jitter(stem_latency(space, cost)) + jitter(head_latency(space, cost, genotype.head_rates))
    for b, branch in enumerate(genotype.branches):
        c_prev = space.stem_spec.out_channels
        trans = cell_transitions(branch, space.rates[0])
        for i, c in enumerate(branch.cells):
            stride = 2 if trans[i] == "stride2" else 1
            h, w = cost.spatial(c.s)
            ms = cost.op_ms(c.op, c_prev, c.c_out, h, w, stride=stride)
            if not (b > 0 and i < genotype.shared_prefix_len):
                total += jitter(ms)
            c_prev = c.c_out
    return total


# -- relaxed ----------------------------------------------------------------
def _shift_down(n: int) -> np.ndarray:
    """Row vector times this matrix moves entry r to r-1."""
    m = np.zeros((n, n))
    for r in range(1, n):
        m[r, r - 1] = 1.0
    return m


def _reach(beta_b: Tensor, final_index: int, layers: int, n_rates: int) -> list[Tensor]:
    """Per-layer probability that the branch path visits each rate."""
    shift = _shift_down(n_rates)
    start = np.zeros(n_rates)
    start[final_index] = 1.0
    reach: list[Tensor] = [None] * layers
    reach[-1] = Tensor(start)
    for l in range(layers - 1, 0, -1):
        cur = reach[l]
        same = mul(cur, beta_b[l, :, 1])
        half = einsum("r,rq->q", mul(cur, beta_b[l, :, 0]), Tensor(shift))
        reach[l - 1] = same + half
    return reach


def branch_latency_from_probs(alpha: Tensor, beta: Tensor, gamma: Tensor, lut: LatencyTable,
                              branch: int) -> Tensor:
    """Expected cell latency of one branch lattice (no stem or head)."""
    space = lut.space
    cell = einsum("lrkjt,lrk,lrj,lrt->lr", Tensor(lut.dense), alpha[branch], gamma[branch], beta[branch])
    reach = stack(_reach(beta[branch], branch, space.layers, len(space.rates)))
    return tsum(mul(reach, cell))


def shared_latency_from_probs(alpha: Tensor, beta: Tensor, gamma: Tensor, lut: LatencyTable,
                              a: int, b: int) -> Tensor:
    """Expected latency of cells the two branches share (identical prefix up to and including them)."""
    space = lut.space
    L, R = space.layers, len(space.rates)
    up = Tensor(_shift_down(R).T)  # moves r-1 -> r
    reach_a = _reach(beta[a], a, L, R)
    reach_b = _reach(beta[b], b, L, R)
    aa = mul(alpha[a], alpha[b])
    gg = mul(gamma[a], gamma[b])
    bb = mul(beta[a], beta[b])  # (L, R, 2)
    match = mul(tsum(aa, axis=-1), tsum(gg, axis=-1))  # (L, R)
    weighted = einsum("lrkjt,lrk,lrj->lrt", Tensor(lut.dense), aa, gg)  # (L, R, 2)
    terms = []
    prev = None  # probability of an identical prefix ending at each rate of layer l-1
    for l in range(L):
        if l == 0:
            into = mul(bb[0, :, 1], weighted[0, :, 1])
            g_l = mul(bb[0, :, 1], match[0])
        else:
            from_same = mul(bb[l, :, 1], prev)
            from_half = mul(bb[l, :, 0], einsum("r,rq->q", prev, up))
            into = mul(from_same, weighted[l, :, 1]) + mul(from_half, weighted[l, :, 0])
            g_l = mul(from_same + from_half, match[l])
        terms.append(tsum(mul(mul(reach_a[l], reach_b[l]), into)))
        prev = g_l
    return add_n(terms)


def _latency_from_probs(probs, lut: LatencyTable, pair=None) -> Tensor:
    alpha, beta, gamma = probs
    space = lut.space
    combos = [tuple(pair)] if pair is not None else [tuple(c) for c in space.rate_combinations]
    needed = sorted({space.rate_index(r) for c in combos for r in c})
    branch = {i: branch_latency_from_probs(alpha, beta, gamma, lut, i) for i in needed}
    totals = []
    for combo in combos:
        idx = [space.rate_index(r) for r in combo]
        parts = [branch[i] for i in idx]
        value = add_n(parts) + (lut.stem_ms + lut.head(combo))
        for i in range(len(idx)):
            for j in range(i + 1, len(idx)):
                value = value - shared_latency_from_probs(alpha, beta, gamma, lut, idx[i], idx[j])
        totals.append(value)
    if len(totals) == 1:
        return totals[0]
    return add_n(totals) * (1.0 / len(totals))


def estimate_relaxed(params: ArchParams, lut: LatencyTable, pair=None) -> Tensor:
    """Expected latency under the relaxed architecture distribution.

    With ``pair`` the head and branches of that final-rate combination are
    used; otherwise the estimate is averaged over all combinations.
    """
    return _latency_from_probs(params.probs(), lut, pair)


@dataclass(frozen=True)
class RegularizerWeights:
    w1: float
    w2: float
    w3: float

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) < 0:
            raise ValueError("regularizer weights must be nonnegative")
        if abs(self.w1 + self.w2 + self.w3 - 1.0) > 1e-9:
            raise ValueError(f"regularizer weights must sum to 1, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w1, self.w2, self.w3)

    @classmethod
    def default(cls) -> "RegularizerWeights":
        return cls(*DEFAULT_WEIGHTS)

    @classmethod
    def uniform(cls) -> "RegularizerWeights":
        return cls(1 / 3, 1 / 3, 1 - 2 / 3)


@dataclass(frozen=True)
class SensitivityReport:
    delta_O: float
    delta_s: float
    delta_chi: float

    def __post_init__(self):
        if min(self.delta_O, self.delta_s, self.delta_chi) < 0:
            raise ValueError("sensitivity gaps must be nonnegative")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.delta_O, self.delta_s, self.delta_chi)


def solve_regularizer_weights(report: SensitivityReport) -> RegularizerWeights:
    """Weights with equal products delta_i * w_i that sum to one."""
    deltas = report.as_tuple()
    if any(d <= 0 for d in deltas):
        raise ValueError(f"all sensitivity gaps must be positive, got {deltas}")
    inv = [1.0 / d for d in deltas]
    total = math.fsum(inv)
    w1, w2 = inv[0] / total, inv[1] / total
    return RegularizerWeights(w1, w2, 1.0 - w1 - w2)


def decoupled_latency(params: ArchParams, lut: LatencyTable, weights: RegularizerWeights,
                      pair=None) -> Tensor:
    """Relaxed latency whose gradient is split per family and rescaled by w1, w2, w3.

    Each family's term lets gradient through that family only; the terms enter
    as ``w * (x - stop_gradient(x))`` so the forward value is unchanged.
    """
    a, b, g = params.probs()
    da, db, dg = stop_gradient(a), stop_gradient(b), stop_gradient(g)
    value = _latency_from_probs((da, db, dg), lut, pair)
    for w, probs, live in (
        (weights.w1, (a, db, dg), a),
        (weights.w2, (da, b, dg), b),
        (weights.w3, (da, db, g), g),
    ):
        if w == 0 or not live.requires_grad:
            continue
        term = _latency_from_probs(probs, lut, pair)
        value = value + (term - stop_gradient(term)) * w
    return value


# -- sensitivity --------------------------------------------------------------
def sensitivity_probe(space: SearchSpace, lut: LatencyTable, axis: str) -> float:
    """Latency gap between the slowest and fastest extreme of one family, others uniform."""
    params = init_uniform(space)
    a, b, g = (t.data for t in params.probs())
    cfg = space.config

    def one_hot(shape, index):
        out = np.zeros(shape)
        out[..., index] = 1.0
        return out

    def value(alpha, beta, gamma) -> float:
        return _latency_from_probs((Tensor(alpha), Tensor(beta), Tensor(gamma)), lut).item()

    if axis == "O":
        ref = np.array([operator_metadata(op).reference_ms for op in cfg.operators])
        ends = [one_hot(a.shape, int(np.argmax(ref))), one_hot(a.shape, int(np.argmin(ref)))]
        vals = [value(x, b, g) for x in ends]
    elif axis == "chi":
        ends = [one_hot(g.shape, len(cfg.ratios) - 1), one_hot(g.shape, 0)]
        vals = [value(a, b, x) for x in ends]
    elif axis == "s":
        vals = []
        for prefer in (0, 1):
            logits = np.full(b.shape, -1e3)
            logits[..., prefer] = 1e3
            params.beta.data[...] = logits
            vals.append(value(a, params.beta_probs().data, g))
    else:
        raise ValueError(f"unknown sensitivity axis {axis!r}")
    return float(max(vals) - min(vals))


def sensitivity_report(space: SearchSpace, lut: LatencyTable) -> SensitivityReport:
    return SensitivityReport(*(sensitivity_probe(space, lut, ax) for ax in ("O", "s", "chi")))
