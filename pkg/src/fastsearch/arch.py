"""Architecture logits for operators (alpha), input edges (beta) and widths (gamma).

Logits are stored per branch (one lattice per final rate) as dense arrays of
shape ``(B, L, R, n)`` with ``B == R == len(rates)``; probabilities are always
softmaxes of the stored logits.  Beta entry 0 is the half-rate predecessor,
entry 1 the same-rate predecessor.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .genotype import Genotype, cell_transitions
from .numerics.tensor import Tensor, log_softmax, parameter, softmax, stop_gradient, where_mask
from .space import CellPosition, SearchSpace, SearchSpaceConfig, build_search_space

ONE_HOT_LOGIT = 1000.0
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GumbelConfig:
    temperature: float = 1.0
    rng_seed: int = 0
    hard: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("Gumbel temperature must be positive")


def cell_masks(space: SearchSpace) -> tuple[np.ndarray, np.ndarray]:
    """(valid[B,L,R], beta_allowed[L,R,2]) for a space."""
    rates, L = space.rates, space.layers
    R = len(rates)
    valid = np.zeros((R, L, R), dtype=bool)
    for b, f in enumerate(rates):
        for l, s in space.branch_cells(f):
            valid[b, l, space.rate_index(s)] = True
    allowed = np.zeros((L, R, 2), dtype=bool)
    for l in range(L):
        for r in range(R):
            if (l, rates[r]) not in space:
                allowed[l, r, 1] = True  # placeholder row, never reached
                continue
            if l == 0:
                allowed[l, r, 1] = True  # fed by the stem
                continue
            allowed[l, r, 0] = r > 0 and (l - 1, rates[r - 1]) in space
            allowed[l, r, 1] = (l - 1, rates[r]) in space
    return valid, allowed


@dataclass
class ArchParams:
    space: SearchSpace
    alpha: Tensor
    beta: Tensor
    gamma: Tensor
    fixed_ratio: int | None = None
    valid: np.ndarray = field(init=False, repr=False)
    beta_allowed: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.valid, self.beta_allowed = cell_masks(self.space)

    # -- probabilities ------------------------------------------------------
    def alpha_probs(self) -> Tensor:
        return softmax(self.alpha, axis=-1)

    def beta_probs(self) -> Tensor:
        """Softmax over the predecessors that exist; forced to one-hot otherwise."""
        allowed = np.broadcast_to(self.beta_allowed, self.beta.shape)
        return softmax(where_mask(self.beta, allowed, -np.inf), axis=-1)

    def raw_beta_probs(self) -> np.ndarray:
        """Unmasked two-way softmax of the stored logits; used when decoding."""
        z = self.beta.data - self.beta.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def gamma_probs(self) -> Tensor:
        if self.fixed_ratio is not None:
            onehot = np.zeros(self.gamma.shape)
            onehot[..., self.fixed_ratio] = 1.0
            return Tensor(onehot)
        return softmax(self.gamma, axis=-1)

    def probs(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.alpha_probs(), self.beta_probs(), self.gamma_probs()

    def index(self, position: CellPosition, branch: int) -> tuple[int, int, int]:
        pos = CellPosition(*position)
        if pos not in self.space:
            raise KeyError(f"unknown cell position {pos}")
        return branch, pos.layer, self.space.rate_index(pos.rate)

    # -- bookkeeping --------------------------------------------------------
    def leaves(self) -> list[Tensor]:
        out = [self.alpha, self.beta]
        if self.fixed_ratio is None:
            out.append(self.gamma)
        return out

    def zero_grad(self) -> None:
        for t in (self.alpha, self.beta, self.gamma):
            t.zero_grad()

    def snapshot(self) -> "ArchParams":
        return copy.deepcopy(self)

    def digest(self) -> str:
        h = hashlib.sha256()
        for t in (self.alpha, self.beta, self.gamma):
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()[:16]

    def mean_derived_ratio(self) -> float:
        """Mean over valid cells of the ratio picked by argmax gamma."""
        ratios = np.asarray(self.space.config.ratios, dtype=float)
        g = self.gamma_probs().data
        picks = ratios[np.argmax(g, axis=-1)]
        return float(picks[self.valid].mean())

    # -- serialisation ------------------------------------------------------
    def to_dict(self, rng_state: dict | None = None) -> dict:
        def per_position(t: Tensor) -> dict:
            out = {}
            for b, f in enumerate(self.space.rates):
                for l, s in self.space.cells:
                    out[f"{f}/{l}/{s}"] = [float(v) for v in t.data[b, l, self.space.rate_index(s)]]
            return out

        return {
            "version": CHECKPOINT_VERSION,
            "space": json.loads(self.space.config.to_json()),
            "fixed_ratio": self.fixed_ratio,
            "alpha": per_position(self.alpha),
            "beta": per_position(self.beta),
            "gamma": per_position(self.gamma),
            "rng_state": rng_state,
        }

    def to_json(self, rng_state: dict | None = None) -> str:
        return json.dumps(self.to_dict(rng_state), indent=1) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> tuple["ArchParams", dict | None]:
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported arch checkpoint version {doc.get('version')!r}")
        space = build_search_space(SearchSpaceConfig.from_dict(doc["space"]))
        params = init_uniform(space, seed=0)
        for name in ("alpha", "beta", "gamma"):
            arr = getattr(params, name).data
            for key, values in doc[name].items():
                f, l, s = (int(x) for x in key.split("/"))
                arr[space.rate_index(f), l, space.rate_index(s)] = values
        params.fixed_ratio = doc.get("fixed_ratio")
        return params, doc.get("rng_state")

    @classmethod
    def load(cls, path: str | Path) -> tuple["ArchParams", dict | None]:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path, rng_state: dict | None = None) -> Path:
        path = Path(path)
        path.write_text(self.to_json(rng_state))
        return path


@dataclass
class TeacherStudentParams:
    teacher: ArchParams
    student: ArchParams

    @classmethod
    def init(cls, space: SearchSpace, seed: int = 0, jitter: float = 0.0) -> "TeacherStudentParams":
        teacher = init_uniform(space, seed, jitter)
        widest = len(space.config.ratios) - 1
        teacher.fixed_ratio = widest
        teacher.gamma.data[...] = -ONE_HOT_LOGIT
        teacher.gamma.data[..., widest] = ONE_HOT_LOGIT
        student = init_uniform(space, seed, jitter)
        return cls(teacher, student)


def init_uniform(space: SearchSpace, seed: int = 0, jitter: float = 0.0) -> ArchParams:
    """Zero logits (uniform softmax), optionally with seeded Gaussian jitter."""
    R, L = len(space.rates), space.layers
    cfg = space.config
    shapes = [(R, L, R, len(cfg.operators)), (R, L, R, 2), (R, L, R, len(cfg.ratios))]
    rng = np.random.default_rng(seed)
    arrays = [jitter * rng.standard_normal(s) if jitter else np.zeros(s) for s in shapes]
    return ArchParams(space, *(parameter(a) for a in arrays))


def probabilities(params: ArchParams, position: CellPosition, branch: int = 0):
    """(alpha, beta, gamma) probability vectors at one cell of one branch lattice."""
    b, l, r = params.index(position, branch)
    a, be, g = params.probs()
    return a.data[b, l, r].copy(), be.data[b, l, r].copy(), g.data[b, l, r].copy()


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(np.finfo(float).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_soft_weights(gamma_logits: Tensor, noise: np.ndarray, temperature: float = 1.0) -> Tensor:
    """softmax((log gamma + o) / tau) along the last axis, differentiable in the logits."""
    logp = log_softmax(gamma_logits, axis=-1)
    return softmax((logp + Tensor(noise)) * (1.0 / temperature), axis=-1)


def gumbel_sample_ratio(params: ArchParams, position: CellPosition, cfg: GumbelConfig,
                        rng: np.random.Generator, branch: int = 0,
                        noise: np.ndarray | None = None) -> tuple[int, Tensor]:
    """Sample one ratio index; returns (index, soft weight vector)."""
    b, l, r = params.index(position, branch)
    logits = params.gamma[b, l, r]
    if noise is None:
        noise = gumbel_noise(rng, logits.shape)
    soft = gumbel_soft_weights(logits, noise, cfg.temperature)
    return int(np.argmax(soft.data)), soft


def straight_through(soft: Tensor, index) -> Tensor:
    """Forward value exactly 1; gradient equal to that of soft[index]."""
    picked = soft[index]
    return picked - stop_gradient(picked) + 1.0


def one_hot_from(genotype: Genotype, space: SearchSpace) -> ArchParams:
    """Logits whose softmax is one-hot on the genotype's choices.

    Branch cell ``i`` sits in layer ``i``; layers after the last cell are
    same-rate skips at the final rate.
    """
    cfg = space.config
    params = init_uniform(space)
    A, Bt, G = params.alpha.data, params.beta.data, params.gamma.data
    base = space.rates[0]
    for branch in genotype.branches:
        if branch.final_rate not in space.rates:
            raise ValueError(f"final rate {branch.final_rate} not in space")
        if len(branch.cells) > space.layers:
            raise ValueError(f"branch has {len(branch.cells)} cells but space has {space.layers} layers")
        b = space.rate_index(branch.final_rate)
        A[b] = 0.0
        Bt[b] = 0.0
        Bt[b, :, :, 0] = -ONE_HOT_LOGIT
        Bt[b, :, :, 1] = ONE_HOT_LOGIT
        G[b] = 0.0
        trans = cell_transitions(branch, base)
        rate = base
        for l in range(space.layers):
            if l < len(branch.cells):
                cell = branch.cells[l]
                if cell.op not in cfg.operators:
                    raise ValueError(f"operator {cell.op!r} not in space")
                if cell.chi not in cfg.ratios:
                    raise ValueError(f"ratio {cell.chi} not in space")
                if (l, cell.s) not in space:
                    raise ValueError(f"cell {l} at rate {cell.s} is outside the lattice")
                op, chi, rate, t = cell.op, cell.chi, cell.s, trans[l]
            else:
                if rate != branch.final_rate:
                    raise ValueError("branch cells do not reach the declared final rate")
                op, chi, t = "skip", cfg.ratios[0], "same"
            r = space.rate_index(rate)
            A[b, l, r] = -ONE_HOT_LOGIT
            A[b, l, r, cfg.operators.index(op)] = ONE_HOT_LOGIT
            G[b, l, r] = -ONE_HOT_LOGIT
            G[b, l, r, cfg.ratios.index(chi)] = ONE_HOT_LOGIT
            if t == "stride2":
                Bt[b, l, r] = (ONE_HOT_LOGIT, -ONE_HOT_LOGIT)
    return params
