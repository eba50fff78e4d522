"""Bilevel search: supernet pretraining, latency-regularized search, co-search, training from scratch."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .arch import ArchParams, GumbelConfig, TeacherStudentParams, init_uniform
from .data import TaskDataset
from .genotype import Genotype
from .latency import LatencyTable, RegularizerWeights, decoupled_latency, estimate_relaxed
from .model import (
    ArgmaxWidth,
    DiscreteNet,
    FixedWidth,
    GumbelWidth,
    RandomWidth,
    SupernetWeights,
    WidthPolicy,
    frozen,
    init_supernet,
    supernet_forward,
)
from .numerics.checkpoint import load_weights, save_weights
from .numerics.losses import confusion, kl_distill, mean_iou, ohem_cross_entropy
from .numerics.tensor import Tensor, add_n, no_grad, stop_gradient
from .optim import SGD, Adam
from .space import SearchSpace, SearchSpaceConfig, build_search_space

TRAJECTORY_COLUMNS = ("step", "phase", "L_seg", "latency_ms", "total", "val_mIoU")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchHyperparams:
    lam: float = 0.01
    pretrain_epochs: int = 4
    search_epochs: int = 8
    batch_size: int = 16
    w_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay: float = 0.99
    arch_lr: float = 3e-4
    arch_betas: tuple[float, float] = (0.5, 0.999)
    arch_weight_decay: float = 0.0
    keep_fraction: float = 0.25
    weights_source: str = "default"  # default | solved | uniform
    solved_weights: tuple[float, float, float] | None = None
    gumbel_temperature: float = 1.0
    gumbel_hard: bool = True
    distill_weight: float = 1.0
    scratch_epochs: int = 10
    scratch_lr: float | None = None  # defaults to w_lr
    cosearch_same_batch: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        for name in ("pretrain_epochs", "search_epochs", "scratch_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.weights_source not in ("default", "solved", "uniform"):
            raise ValueError(f"unknown weights source {self.weights_source!r}")
        if self.weights_source == "solved" and self.solved_weights is None:
            raise ValueError("weights_source='solved' needs solved_weights")

    def regularizer_weights(self) -> RegularizerWeights:
        if self.weights_source == "default":
            return RegularizerWeights.default()
        if self.weights_source == "uniform":
            return RegularizerWeights.uniform()
        return RegularizerWeights(*self.solved_weights)

    def gumbel(self) -> GumbelConfig:
        return GumbelConfig(self.gumbel_temperature, self.seed, self.gumbel_hard)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchHyperparams":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown hyperparameters: {sorted(extra)}")
        doc = dict(doc)
        for key in ("arch_betas", "solved_weights"):
            if doc.get(key) is not None:
                doc[key] = tuple(doc[key])
        return cls(**doc)


@dataclass
class Trajectory:
    rows: list[tuple] = field(default_factory=list)

    def log(self, step: int, phase: str, l_seg=None, latency=None, total=None, val=None) -> None:
        self.rows.append((step, phase, l_seg, latency, total, val))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(TRAJECTORY_COLUMNS)
        for row in self.rows:
            wr.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
        return buf.getvalue()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path

    def last(self, phase: str, column: str):
        i = TRAJECTORY_COLUMNS.index(column)
        for row in reversed(self.rows):
            if row[1] == phase:
                return row[i]
        return None


@dataclass
class SupernetState:
    weights: SupernetWeights
    arch: ArchParams | TeacherStudentParams
    hp: SearchHyperparams
    w_opt: SGD
    arch_opts: dict[str, Adam]
    epoch: int = 0
    step: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    loss_history: list[float] = field(default_factory=list)

    @property
    def space(self) -> SearchSpace:
        return self.weights.space

    @property
    def student(self) -> ArchParams:
        return self.arch.student if isinstance(self.arch, TeacherStudentParams) else self.arch

    def arch_sets(self) -> dict[str, ArchParams]:
        if isinstance(self.arch, TeacherStudentParams):
            return {"teacher": self.arch.teacher, "student": self.arch.student}
        return {"student": self.arch}

    # -- checkpoints ---------------------------------------------------------------
    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_weights(d / "weights", self.weights.named_arrays())
        opt = {f"w.{k}": v for k, v in self.w_opt.state().items()}
        for name, o in self.arch_opts.items():
            opt.update({f"{name}.{k}": v for k, v in o.state().items()})
        save_weights(d / "optim", opt)
        for name, params in self.arch_sets().items():
            params.save(d / f"arch_{name}.json")
        meta = {
            "version": 1,
            "space": json.loads(self.space.config.to_json()),
            "num_classes": self.weights.num_classes,
            "hp": self.hp.to_dict(),
            "cosearch": isinstance(self.arch, TeacherStudentParams),
            "epoch": self.epoch,
            "step": self.step,
            "rng_state": self.rng.bit_generator.state,
            "loss_history": self.loss_history,
        }
        (d / "state.json").write_text(json.dumps(meta, indent=1) + "\n")
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "SupernetState":
        d = Path(directory)
        meta = json.loads((d / "state.json").read_text())
        space = build_search_space(SearchSpaceConfig.from_dict(meta["space"]))
        hp = SearchHyperparams.from_dict(meta["hp"])
        state = new_state(space, meta["num_classes"], hp, cosearch=meta["cosearch"])
        state.weights.load_arrays(load_weights(d / "weights"))
        for name in state.arch_sets():
            loaded, _ = ArchParams.load(d / f"arch_{name}.json")
            target = state.arch_sets()[name]
            for fam in ("alpha", "beta", "gamma"):
                getattr(target, fam).data[...] = getattr(loaded, fam).data
            target.fixed_ratio = loaded.fixed_ratio
        opt = load_weights(d / "optim")
        state.w_opt.load_state({k[2:]: v for k, v in opt.items() if k.startswith("w.")})
        for name, o in state.arch_opts.items():
            o.load_state({k[len(name) + 1 :]: v for k, v in opt.items() if k.startswith(name + ".")})
        state.epoch, state.step = meta["epoch"], meta["step"]
        state.rng.bit_generator.state = meta["rng_state"]
        state.loss_history = list(meta["loss_history"])
        return state


def new_state(space: SearchSpace, num_classes: int, hp: SearchHyperparams, cosearch: bool = False,
              weight_seed: int | None = None) -> SupernetState:
    seed = hp.seed if weight_seed is None else weight_seed
    weights = init_supernet(space, num_classes, seed)
    arch = TeacherStudentParams.init(space) if cosearch else init_uniform(space)
    w_opt = SGD(weights.parameters(), hp.w_lr, hp.momentum, hp.weight_decay)
    sets = {"teacher": arch.teacher, "student": arch.student} if cosearch else {"student": arch}
    arch_opts = {
        name: Adam(p.leaves(), hp.arch_lr, hp.arch_betas, weight_decay=hp.arch_weight_decay)
        for name, p in sets.items()
    }
    rng = np.random.default_rng([hp.seed, 101])
    return SupernetState(weights, arch, hp, w_opt, arch_opts, rng=rng)


def reset_arch(state: SupernetState, cosearch: bool = False) -> SupernetState:
    """Fresh architecture parameters and optimizers over the same weights (e.g. after shared pretraining)."""
    space = state.space
    arch = TeacherStudentParams.init(space) if cosearch else init_uniform(space)
    sets = {"teacher": arch.teacher, "student": arch.student} if cosearch else {"student": arch}
    hp = state.hp
    opts = {n: Adam(p.leaves(), hp.arch_lr, hp.arch_betas, weight_decay=hp.arch_weight_decay)
            for n, p in sets.items()}
    return replace(state, arch=arch, arch_opts=opts)


def clone_state(state: SupernetState, hp: SearchHyperparams | None = None) -> SupernetState:
    """Independent deep copy (weights, arch, optimizer moments, rng)."""
    import copy

    out = copy.deepcopy(state)
    if hp is not None:
        out.hp = hp
    return out


# -- helpers ---------------------------------------------------------------------------
def _check(value: float, state: SupernetState, phase: str) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at step {state.step} ({phase})")


def _epoch_rng(hp: SearchHyperparams, epoch: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([hp.seed, epoch, tag])


def _seg_loss(weights, images, labels, probs, policy: WidthPolicy, keep: float) -> Tensor:
    outs = supernet_forward(weights, Tensor(images), probs, policy)
    losses = [ohem_cross_entropy(o, labels, keep) for o in outs.values()]
    return add_n(losses) * (1.0 / len(losses))


def _detached_probs(params: ArchParams):
    return tuple(stop_gradient(p) for p in params.probs())


def width_set(state: SupernetState, phase: str, params: ArchParams | None) -> list[WidthPolicy]:
    """Widths trained per weight step: {min, max, r1, r2} when pretraining; {min, max, sampled} when searching."""
    n = len(state.space.config.ratios)
    if phase == "pretrain":
        return [FixedWidth(0), FixedWidth(n - 1), RandomWidth(n, state.rng), RandomWidth(n, state.rng)]
    if params is not None and params.fixed_ratio is not None:
        return [FixedWidth(params.fixed_ratio)]
    with frozen(params.leaves()):
        sampled = GumbelWidth.sample(params, state.hp.gumbel(), state.rng)
    return [FixedWidth(0), FixedWidth(n - 1), sampled]


def train_widths(state: SupernetState, batch, phase: str, params: ArchParams | None = None) -> float:
    """Accumulate weight gradients over the phase's width set, then take one SGD step.

    Gradients are summed over passes and divided by the pass count.
    """
    _, images, labels = batch
    params = params if params is not None else state.student
    policies = width_set(state, phase, params)
    state.w_opt.zero_grad()
    total = 0.0
    with frozen(params.leaves()):
        probs = _detached_probs(params)
        for pol in policies:
            loss = _seg_loss(state.weights, images, labels, probs, pol, state.hp.keep_fraction)
            _check(loss.item(), state, phase)
            loss.backward()
            total += loss.item()
    state.w_opt.step(scale=1.0 / len(policies))
    state.w_opt.zero_grad()
    return total / len(policies)


def arch_step(state: SupernetState, batch, params: ArchParams, opt: Adam, lut: LatencyTable | None,
              lam: float) -> tuple[float, float | None, float]:
    """One architecture update on L_seg (+ lam * decoupled latency); weights stay fixed."""
    _, images, labels = batch
    hp = state.hp
    opt.zero_grad()
    with frozen(state.weights.parameters()):
        if params.fixed_ratio is not None:
            policy: WidthPolicy = FixedWidth(params.fixed_ratio)
        else:
            policy = GumbelWidth.sample(params, hp.gumbel(), state.rng)
        loss = _seg_loss(state.weights, images, labels, params.probs(), policy, hp.keep_fraction)
        l_seg = loss.item()
        latency = None
        if lut is not None:
            lat = decoupled_latency(params, lut, hp.regularizer_weights())
            latency = lat.item()
            loss = loss + lat * lam
        total = loss.item()
        _check(total, state, "arch")
        loss.backward()
    opt.step()
    opt.zero_grad()
    return l_seg, latency, total


def evaluate_supernet(state: SupernetState, data: TaskDataset, params: ArchParams | None = None,
                      batch_size: int | None = None) -> float:
    """Validation mIoU of the relaxed supernet at argmax widths, averaged over rate combinations."""
    params = params if params is not None else state.student
    space = state.space
    k = state.weights.num_classes
    confs = {c: np.zeros((k, k), dtype=np.int64) for c in space.rate_combinations}
    with no_grad():
        probs = _detached_probs(params)
        policy = ArgmaxWidth(params.gamma_probs().data)
        for _, images, labels in data.batches(batch_size or state.hp.batch_size):
            outs = supernet_forward(state.weights, Tensor(images), probs, policy)
            for combo, logits in outs.items():
                confs[combo] += confusion(np.argmax(logits.data, axis=1), labels, k)
    return float(np.mean([mean_iou(c) for c in confs.values()]))


# -- phases ----------------------------------------------------------------------------------
def pretrain(state: SupernetState, data: dict[str, TaskDataset], hp: SearchHyperparams | None = None,
             log: Trajectory | None = None) -> SupernetState:
    """Weights only, architecture frozen at its current (uniform) value."""
    hp = hp or state.hp
    for _ in range(hp.pretrain_epochs):
        state.w_opt.lr = hp.w_lr * hp.lr_decay**state.epoch
        for batch in data["trainA"].batches(hp.batch_size, _epoch_rng(hp, state.epoch, 1)):
            loss = train_widths(state, batch, "pretrain")
            state.loss_history.append(loss)
            state.step += 1
            if log is not None:
                log.log(state.step, "pretrain", loss, None, loss)
        state.epoch += 1
    return state


def search(state: SupernetState, data: dict[str, TaskDataset], lut: LatencyTable,
           hp: SearchHyperparams | None = None) -> tuple[SupernetState, Trajectory]:
    """Alternate a weight step on trainA and an architecture step on trainB, per batch pair."""
    hp = hp or state.hp
    log = Trajectory()
    params, opt = state.student, state.arch_opts["student"]
    for e in range(hp.search_epochs):
        state.w_opt.lr = hp.w_lr * hp.lr_decay**state.epoch
        a_batches = data["trainA"].batches(hp.batch_size, _epoch_rng(hp, state.epoch, 1))
        b_batches = data["trainB"].batches(hp.batch_size, _epoch_rng(hp, state.epoch, 2))
        for a, b in zip(a_batches, b_batches):
            loss = train_widths(state, a, "search", params)
            state.step += 1
            log.log(state.step, "weights", loss, None, loss)
            l_seg, lat, total = arch_step(state, b, params, opt, lut, hp.lam)
            state.step += 1
            log.log(state.step, "arch", l_seg, lat, total)
        state.epoch += 1
        val = evaluate_supernet(state, data["val"], params)
        log.log(state.step, "epoch", None, estimate_relaxed(params, lut).item(), None, val)
    return state, log


def co_search(state: SupernetState, data: dict[str, TaskDataset], lut: LatencyTable,
              hp: SearchHyperparams | None = None) -> tuple[ArchParams, ArchParams, Trajectory]:
    """Four steps per iteration: W (teacher arch), W (student arch), teacher arch, student arch."""
    hp = hp or state.hp
    if not isinstance(state.arch, TeacherStudentParams):
        raise TypeError("co-search needs teacher/student parameters")
    teacher, student = state.arch.teacher, state.arch.student
    log = Trajectory()
    for e in range(hp.search_epochs):
        state.w_opt.lr = hp.w_lr * hp.lr_decay**state.epoch
        a_list = list(data["trainA"].batches(hp.batch_size, _epoch_rng(hp, state.epoch, 1)))
        b_list = list(data["trainB"].batches(hp.batch_size, _epoch_rng(hp, state.epoch, 2)))
        for i, b in enumerate(b_list):
            a_t = a_list[i % len(a_list)]
            a_s = a_t if hp.cosearch_same_batch else a_list[(i + 1) % len(a_list)]
            loss = train_widths(state, a_t, "search", teacher)
            state.step += 1
            log.log(state.step, "weights_teacher", loss, None, loss)
            loss = train_widths(state, a_s, "search", student)
            state.step += 1
            log.log(state.step, "weights_student", loss, None, loss)
            l_seg, _, total = arch_step(state, b, teacher, state.arch_opts["teacher"], None, 0.0)
            state.step += 1
            log.log(state.step, "arch_teacher", l_seg, None, total)
            l_seg, lat, total = arch_step(state, b, student, state.arch_opts["student"], lut, hp.lam)
            state.step += 1
            log.log(state.step, "arch_student", l_seg, lat, total)
        state.epoch += 1
        for name, p in (("teacher", teacher), ("student", student)):
            val = evaluate_supernet(state, data["val"], p)
            log.log(state.step, f"epoch_{name}", None, estimate_relaxed(p, lut).item(), None, val)
    return teacher, student, log


# -- training derived networks -------------------------------------------------------------
def evaluate_net(net: DiscreteNet, data: TaskDataset, batch_size: int = 16) -> float:
    k = net.num_classes
    conf = np.zeros((k, k), dtype=np.int64)
    with no_grad():
        for _, images, labels in data.batches(batch_size):
            logits = net.forward(Tensor(images))
            conf += confusion(np.argmax(logits.data, axis=1), labels, k)
    return mean_iou(conf)


def train_from_scratch(genotype: Genotype, data: dict[str, TaskDataset], hp: SearchHyperparams,
                       space: SearchSpace, num_classes: int,
                       teacher: DiscreteNet | None = None) -> tuple[DiscreteNet, float, Trajectory]:
    """Train the discrete network on trainA+trainB; with a teacher add ``distill_weight * KL``."""
    if teacher is not None and teacher.num_classes != num_classes:
        raise ValueError(f"teacher predicts {teacher.num_classes} classes, student {num_classes}")
    net = DiscreteNet.init(space, genotype, num_classes, seed=hp.seed)
    lr = hp.w_lr if hp.scratch_lr is None else hp.scratch_lr
    opt = SGD(net.parameters(), lr, hp.momentum, hp.weight_decay)
    train = _concat(data["trainA"], data["trainB"])
    log = Trajectory()
    step = 0
    for epoch in range(hp.scratch_epochs):
        opt.lr = lr * hp.lr_decay**epoch
        for _, images, labels in train.batches(hp.batch_size, _epoch_rng(hp, epoch, 3)):
            opt.zero_grad()
            x = Tensor(images)
            logits = net.forward(x)
            l_seg = ohem_cross_entropy(logits, labels, hp.keep_fraction)
            loss = l_seg
            distill = None
            if teacher is not None:
                with no_grad():
                    t_logits = teacher.forward(x)
                kl = kl_distill(logits, t_logits)
                distill = kl.item()
                loss = loss + kl * hp.distill_weight
            total = loss.item()
            if not math.isfinite(total):
                raise DivergenceError(f"non-finite loss {total} at scratch step {step}")
            loss.backward()
            opt.step()
            step += 1
            log.log(step, "scratch", l_seg.item(), distill, total)
        log.log(step, "epoch", None, None, None, evaluate_net(net, data["val"], hp.batch_size))
    opt.zero_grad()
    return net, evaluate_net(net, data["val"], hp.batch_size), log


def _concat(a: TaskDataset, b: TaskDataset) -> TaskDataset:
    order = np.argsort(np.concatenate([a.indices, b.indices]), kind="stable")
    return TaskDataset(
        "train",
        np.concatenate([a.indices, b.indices])[order],
        np.concatenate([a.images, b.images])[order],
        np.concatenate([a.labels, b.labels])[order],
    )
