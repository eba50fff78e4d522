"""Supernet and discrete network forwards: stem, searchable cells, two-branch head."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .arch import ArchParams, GumbelConfig, cell_masks, gumbel_noise, gumbel_soft_weights
from .genotype import Genotype, cell_transitions
from .latency import cell_transitions_at
from .numerics.ops import ConvUnit, Superkernel, op_forward, resize
from .numerics.tensor import Tensor, add_n, mul, relu, stop_gradient
from .space import SearchSpace

TRANSITION_STRIDE = {"stride2": 2, "same": 1}


# -- stem / head ---------------------------------------------------------------
def init_stem(space: SearchSpace, rng: np.random.Generator) -> list[ConvUnit]:
    units = []
    for c_in, c_out, _ in space.stem_spec.layers:
        cin = c_in if c_in == 3 else space.concrete(c_in)
        units.append(ConvUnit.init(rng, space.concrete(c_out), cin))
    return units


def stem_forward(image: Tensor, units: list[ConvUnit], space: SearchSpace) -> Tensor:
    """Five 3x3 convs; output at 1/8 of the input resolution."""
    space.stem_spec.output_size(*image.shape[-2:])
    x = image
    for unit, (_, c_out, stride) in zip(units, space.stem_spec.layers):
        x = unit(x, unit.weight.shape[0], stride=stride)
    return x


@dataclass
class Head:
    """1x1 reduce of the coarse input, bilinear upsample, 3x3 fuse, 1x1 classifier."""

    fuse_hi: ConvUnit
    classifier: ConvUnit
    reduce: ConvUnit | None = None
    fuse_lo: ConvUnit | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, hi_channels: int, lo_channels: int | None,
             base: int, num_classes: int) -> "Head":
        reduce = fuse_lo = None
        if lo_channels is not None:
            reduce = ConvUnit.init(rng, base, lo_channels, k=1)
            fuse_lo = ConvUnit.init(rng, base, base)
        fuse_hi = ConvUnit.init(rng, base, hi_channels)
        classifier = ConvUnit.init(rng, num_classes, base, k=1, norm=False)
        return cls(fuse_hi, classifier, reduce, fuse_lo)

    def parameters(self) -> list[Tensor]:
        units = [u for u in (self.fuse_hi, self.classifier, self.reduce, self.fuse_lo) if u is not None]
        return [p for u in units for p in u.parameters()]


def head_forward(feat_hi: Tensor, feat_lo: Tensor | None, head: Head) -> Tensor:
    """Per-pixel class logits at the resolution of ``feat_hi``.

    Concatenation followed by a 3x3 conv is written as the sum of two 3x3 convs
    over the two channel groups.
    """
    base = head.fuse_hi.weight.shape[0]
    y = head.fuse_hi(feat_hi, base, act=False)
    if feat_lo is not None:
        (h, w), (hl, wl) = feat_hi.shape[-2:], feat_lo.shape[-2:]
        if h % hl or w % wl or h // hl != w // wl or (h // hl) & (h // hl - 1):
            raise ValueError(f"head inputs {h}x{w} and {hl}x{wl} differ by a non power-of-two factor")
        lo = head.reduce(feat_lo, base, act=True)
        lo = resize(lo, (h, w))
        y = y + head.fuse_lo(lo, base, act=False)
    y = relu(y)
    return head.classifier(y, head.classifier.weight.shape[0], act=False)


# -- width policies -------------------------------------------------------------
class WidthPolicy:
    """Chooses a ratio index per cell and an optional multiplicative factor."""

    def __call__(self, branch: int, layer: int, rate: int) -> tuple[int, Tensor | None]:
        raise NotImplementedError


@dataclass
class FixedWidth(WidthPolicy):
    index: int

    def __call__(self, branch, layer, rate):
        return self.index, None


@dataclass
class RandomWidth(WidthPolicy):
    """A fresh uniformly random ratio for every cell."""

    n: int
    rng: np.random.Generator

    def __call__(self, branch, layer, rate):
        return int(self.rng.integers(self.n)), None


@dataclass
class ArgmaxWidth(WidthPolicy):
    gamma_probs: np.ndarray

    def __call__(self, branch, layer, rate):
        return int(np.argmax(self.gamma_probs[branch, layer, rate])), None


@dataclass
class GumbelWidth(WidthPolicy):
    """Gumbel-softmax sample per cell; the forward uses the hard index.

    ``hard`` multiplies the output by ``1 + soft_j - sg(soft_j)`` (value 1,
    gradient of ``soft_j``); otherwise by ``soft_j`` itself.
    """

    soft: Tensor
    index: np.ndarray
    hard: bool = True

    @classmethod
    def sample(cls, params: ArchParams, cfg: GumbelConfig, rng: np.random.Generator,
               noise: np.ndarray | None = None) -> "GumbelWidth":
        if noise is None:
            noise = gumbel_noise(rng, params.gamma.shape)
        soft = gumbel_soft_weights(params.gamma, noise, cfg.temperature)
        return cls(soft, np.argmax(soft.data, axis=-1), cfg.hard)

    def __call__(self, branch, layer, rate):
        j = int(self.index[branch, layer, rate])
        picked = self.soft[branch, layer, rate, j]
        if self.hard:
            return j, picked - stop_gradient(picked) + 1.0
        return j, picked


# -- supernet -------------------------------------------------------------------
@dataclass
class SupernetWeights:
    space: SearchSpace
    num_classes: int
    stem: list[ConvUnit]
    kernels: dict[tuple, Superkernel]
    heads: dict[tuple[int, ...], Head]

    def parameters(self) -> list[Tensor]:
        params = [p for u in self.stem for p in u.parameters()]
        for key in sorted(self.kernels, key=str):
            params.extend(self.kernels[key].parameters())
        for key in sorted(self.heads):
            params.extend(self.heads[key].parameters())
        return params

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, u in enumerate(self.stem):
            for name, p in zip(("weight", "scale", "shift"), u.parameters()):
                out[f"stem.{i}.{name}"] = p.data
        for (l, s, op, t), k in self.kernels.items():
            for i, u in enumerate(k.units):
                for name, p in zip(("weight", "scale", "shift"), u.parameters()):
                    out[f"cell.{l}.{s}.{op}.{t}.{i}.{name}"] = p.data
        for rates, h in self.heads.items():
            tag = "-".join(map(str, rates))
            for part in ("fuse_hi", "classifier", "reduce", "fuse_lo"):
                u = getattr(h, part)
                if u is None:
                    continue
                for name, p in zip(("weight", "scale", "shift"), u.parameters()):
                    out[f"head.{tag}.{part}.{name}"] = p.data
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        mine = self.named_arrays()
        if set(mine) != set(arrays):
            missing = sorted(set(mine) ^ set(arrays))[:5]
            raise ValueError(f"weight names do not match: {missing}")
        for name, arr in mine.items():
            if arr.shape != arrays[name].shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {arrays[name].shape}")
            arr[...] = arrays[name]


def _cell_in_width(space: SearchSpace, layer: int, rate: int, transition: str) -> int:
    if layer == 0:
        return space.concrete(space.stem_spec.out_channels)
    src = rate // 2 if transition == "stride2" else rate
    return space.max_width(src)


def init_supernet(space: SearchSpace, num_classes: int, seed: int = 0) -> SupernetWeights:
    rng = np.random.default_rng(seed)
    stem = init_stem(space, rng)
    kernels = {}
    for l, s in space.cells:
        for t in cell_transitions_at(space, l, s):
            c_in = _cell_in_width(space, l, s, t)
            for op in space.config.operators:
                kernels[(l, s, op, t)] = Superkernel.init(
                    op, c_in, space.max_width(s), TRANSITION_STRIDE[t], rng
                )
    base = space.concrete(space.head_spec.fuse_channels)
    heads = {}
    for combo in space.rate_combinations:
        hi = space.max_width(combo[0])
        lo = space.max_width(combo[-1]) if len(combo) > 1 else None
        heads[tuple(combo)] = Head.init(rng, hi, lo, base, num_classes)
    return SupernetWeights(space, num_classes, stem, kernels, heads)


def cell_forward(weights: SupernetWeights, position: tuple[int, int], inputs: dict[str, Tensor | None],
                 alpha, beta, c_out: int) -> Tensor:
    """One searchable cell: beta-weighted inputs, each through the alpha-weighted operator sum.

    ``inputs`` maps "same" and/or "stride2" to the predecessor feature; the
    stride-2 input comes from the half rate and is downsampled by this cell's
    operators.  ``alpha`` holds one weight per operator, ``beta`` the pair
    (stride2, same).  Zero weights without gradients are skipped.
    """
    l, s = position
    ops_names = weights.space.config.operators
    terms = []
    for t, x in inputs.items():
        if x is None:
            continue
        bw = beta[0 if t == "stride2" else 1]
        if bw.data == 0.0 and not bw.requires_grad:
            continue
        ops = []
        for k, op in enumerate(ops_names):
            aw = alpha[k]
            if aw.data == 0.0 and not aw.requires_grad:
                continue
            y = op_forward(op, x, weights.kernels[(l, s, op, t)], c_out, TRANSITION_STRIDE[t])
            ops.append(mul(y, aw))
        if ops:
            terms.append(mul(add_n(ops), bw))
    if not terms:
        raise ValueError(f"cell {position} has no active input")
    return add_n(terms)


def branch_forward(weights: SupernetWeights, stem_out: Tensor, probs, branch: int,
                   policy: WidthPolicy) -> Tensor:
    """Relaxed lattice of one branch (final rate ``rates[branch]``)."""
    space = weights.space
    alpha, beta, _ = probs
    rates = space.rates
    L, R = space.layers, len(rates)
    valid, _ = cell_masks(space)
    feats: dict[tuple[int, int], Tensor] = {}
    for l in range(L):
        for r in range(R):
            if not valid[branch, l, r]:
                continue
            s = rates[r]
            inputs = {"same": stem_out if l == 0 else feats.get((l - 1, r))}
            if l > 0 and r > 0:
                inputs["stride2"] = feats.get((l - 1, r - 1))
            j, factor = policy(branch, l, r)
            c_out = space.width(s, space.config.ratios[j])
            out = cell_forward(weights, (l, s), inputs, alpha[branch, l, r], beta[branch, l, r], c_out)
            if factor is not None:
                out = mul(out, factor)
            feats[(l, r)] = out
    return feats[(L - 1, branch)]


def supernet_forward(weights: SupernetWeights, images: Tensor, probs, policy: WidthPolicy,
                     combos=None) -> dict[tuple[int, ...], Tensor]:
    """Logits (upsampled to the image size) for each final-rate combination."""
    space = weights.space
    combos = [tuple(c) for c in (combos or space.rate_combinations)]
    stem_out = stem_forward(images, weights.stem, space)
    needed = sorted({space.rate_index(r) for c in combos for r in c})
    feats = {space.rates[b]: branch_forward(weights, stem_out, probs, b, policy) for b in needed}
    out = {}
    for combo in combos:
        lo = feats[combo[-1]] if len(combo) > 1 else None
        logits = head_forward(feats[combo[0]], lo, weights.heads[combo])
        out[combo] = resize(logits, images.shape[-2:])
    return out


@contextmanager
def frozen(tensors):
    """Temporarily exclude leaves from the graph."""
    tensors = list(tensors)
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in zip(tensors, saved):
            t.requires_grad = flag


# -- discrete network ---------------------------------------------------------------
@dataclass
class DiscreteNet:
    """Stand-alone network realising a genotype; shared-prefix cells run once."""

    space: SearchSpace
    genotype: Genotype
    num_classes: int
    stem: list[ConvUnit]
    cells: list[list[Superkernel]]
    head: Head
    strides: list[list[int]] = field(default_factory=list)

    @classmethod
    def init(cls, space: SearchSpace, genotype: Genotype, num_classes: int, seed: int = 0) -> "DiscreteNet":
        rng = np.random.default_rng(seed)
        stem = init_stem(space, rng)
        cells, strides = [], []
        stem_c = space.concrete(space.stem_spec.out_channels)
        for b, branch in enumerate(genotype.branches):
            trans = cell_transitions(branch, space.rates[0])
            c_in, row, srow = stem_c, [], []
            for i, c in enumerate(branch.cells):
                stride = TRANSITION_STRIDE[trans[i]]
                c_out = space.width(c.s, c.chi)
                if b > 0 and i < genotype.shared_prefix_len:
                    row.append(cells[0][i])
                else:
                    row.append(Superkernel.init(c.op, c_in, c_out, stride, rng))
                srow.append(stride)
                c_in = c_out
            cells.append(row)
            strides.append(srow)
        widths = [cls._out_width(space, br, stem_c) for br in genotype.branches]
        base = space.concrete(space.head_spec.fuse_channels)
        lo = widths[-1] if len(widths) > 1 else None
        head = Head.init(rng, widths[0], lo, base, num_classes)
        return cls(space, genotype, num_classes, stem, cells, head, strides)

    @staticmethod
    def _out_width(space: SearchSpace, branch, stem_c: int) -> int:
        return space.width(branch.cells[-1].s, branch.cells[-1].chi) if branch.cells else stem_c

    def parameters(self) -> list[Tensor]:
        params = [p for u in self.stem for p in u.parameters()]
        seen = set()
        for row in self.cells:
            for k in row:
                if id(k) not in seen:
                    seen.add(id(k))
                    params.extend(k.parameters())
        return params + self.head.parameters()

    def branch_features(self, stem_out: Tensor) -> list[Tensor]:
        feats, shared = [], []
        for b, branch in enumerate(self.genotype.branches):
            x = stem_out
            for i, c in enumerate(branch.cells):
                if b > 0 and i < self.genotype.shared_prefix_len:
                    x = shared[i]
                    continue
                kernel = self.cells[b][i]
                x = op_forward(c.op, x, kernel, kernel.max_out, self.strides[b][i])
                if b == 0:
                    shared.append(x)
            if not branch.cells and branch.final_rate != self.space.rates[0]:
                raise ValueError("an empty branch must end at the base rate")
            feats.append(x)
        return feats

    def forward(self, images: Tensor) -> Tensor:
        stem_out = stem_forward(images, self.stem, self.space)
        feats = self.branch_features(stem_out)
        lo = feats[-1] if len(feats) > 1 else None
        logits = head_forward(feats[0], lo, self.head)
        return resize(logits, images.shape[-2:])
