"""Run configuration presets and end-to-end pipelines shared by the CLI, scripts and tests."""
from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

from .arch import ArchParams
from .data import TaskConfig, TaskDataset, make_task
from .derivation import BranchSelectConfig, Candidate, branch_targets, derive_genotype, select_branches
from .genotype import Genotype
from .latency import CostModel, LatencyTable, build_lut, estimate_discrete, estimate_relaxed
from .search import (
    SearchHyperparams,
    SupernetState,
    Trajectory,
    clone_state,
    co_search,
    new_state,
    pretrain,
    search,
    train_from_scratch,
)
from .space import SearchSpace, SearchSpaceConfig, build_search_space

MODES = {"naive": "uniform", "decoupled": "default"}


# -- configuration -------------------------------------------------------------------
def load_presets() -> dict:
    text = resources.files("fastsearch").joinpath("data/presets.json").read_text()
    return json.loads(text)


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class RunConfig:
    space: SearchSpaceConfig = field(default_factory=SearchSpaceConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    hp: SearchHyperparams = field(default_factory=SearchHyperparams)
    select: BranchSelectConfig = field(default_factory=BranchSelectConfig)
    select_epochs: int = 2

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {"space", "task", "search", "select", "select_epochs"}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown config sections: {sorted(extra)}")
        task = dict(doc.get("task", {}))
        if "period" in task:
            task["period"] = tuple(task["period"])
        return cls(
            SearchSpaceConfig.from_dict(doc.get("space", {"version": 1})),
            TaskConfig(**task),
            SearchHyperparams.from_dict(doc.get("search", {})),
            BranchSelectConfig(**doc.get("select", {})),
            int(doc.get("select_epochs", 2)),
        )

    def to_dict(self) -> dict:
        return {
            "space": json.loads(self.space.to_json()),
            "task": asdict(self.task),
            "search": self.hp.to_dict(),
            "select": asdict(self.select),
            "select_epochs": self.select_epochs,
        }

    def with_hp(self, **changes) -> "RunConfig":
        return replace(self, hp=replace(self.hp, **changes))


def run_config(preset: str = "desk", overrides: dict | None = None) -> RunConfig:
    """Preset values, then ``overrides`` (same nested layout) on top."""
    presets = load_presets()
    if preset not in presets:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(presets)}")
    return RunConfig.from_dict(deep_merge(presets[preset], overrides or {}))


@dataclass
class Workspace:
    """Everything derived deterministically from a config: space, LUT and task data."""

    config: RunConfig
    space: SearchSpace
    lut: LatencyTable
    data: dict[str, TaskDataset]

    @classmethod
    def build(cls, config: RunConfig) -> "Workspace":
        space = build_search_space(config.space)
        return cls(config, space, build_lut(space, CostModel()), make_task(config.task))


# -- single search -------------------------------------------------------------------
@dataclass
class ArmResult:
    mode: str
    state: SupernetState
    trajectory: Trajectory
    mean_ratio: float
    val: float
    latency_ms: float


def pretrained_state(ws: Workspace, cosearch: bool = False) -> tuple[SupernetState, Trajectory]:
    log = Trajectory()
    state = new_state(ws.space, ws.config.task.num_classes, ws.config.hp, cosearch=cosearch)
    pretrain(state, ws.data, log=log)
    return state, log


def run_arm(ws: Workspace, state: SupernetState, mode: str, prefix: Trajectory | None = None) -> ArmResult:
    """Search from (a copy of) a pretrained state with naive or decoupled latency weights."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {sorted(MODES)}")
    hp = replace(ws.config.hp, weights_source=MODES[mode])
    arm = clone_state(state, hp)
    arm, log = search(arm, ws.data, ws.lut)
    traj = Trajectory(list(prefix.rows) + log.rows if prefix else log.rows)
    val = log.last("epoch", "val_mIoU")
    lat = estimate_relaxed(arm.student, ws.lut).item()
    return ArmResult(mode, arm, traj, arm.student.mean_derived_ratio(), val, lat)


@dataclass
class CollapseResult:
    naive: ArmResult
    decoupled: ArmResult
    seconds: float

    def summary(self) -> dict:
        return {
            arm.mode: {"mean_ratio": arm.mean_ratio, "val_mIoU": arm.val, "latency_ms": arm.latency_ms}
            for arm in (self.naive, self.decoupled)
        } | {"seconds": self.seconds}


def collapse_experiment(config: RunConfig) -> CollapseResult:
    """Shared pretraining, then one naive and one decoupled search arm from the same weights."""
    t0 = time.perf_counter()
    ws = Workspace.build(config)
    state, log = pretrained_state(ws)
    naive = run_arm(ws, state, "naive", log)
    decoupled = run_arm(ws, state, "decoupled", log)
    return CollapseResult(naive, decoupled, time.perf_counter() - t0)


# -- derivation with branch selection ------------------------------------------------------
@dataclass
class Derived:
    genotype: Genotype
    candidates: list[Candidate]
    targets: list[float]


def derive_candidates(ws: Workspace, params: ArchParams, epochs: int | None = None) -> Derived:
    """Decode every rate pair, score each by short training and estimated latency, pick the best."""
    epochs = ws.config.select_epochs if epochs is None else epochs
    hp = replace(ws.config.hp, scratch_epochs=epochs)
    cands = []
    for pair in ws.space.rate_combinations:
        g = derive_genotype(params, ws.space, pair)
        acc = 1.0
        if epochs:
            _, acc, _ = train_from_scratch(g, ws.data, hp, ws.space, ws.config.task.num_classes)
        cands.append(Candidate(g, max(acc, 1e-9), estimate_discrete(g, ws.lut)))
    best = select_branches(cands, ws.config.select)
    return Derived(best, cands, branch_targets(cands, ws.config.select))


# -- co-search and distillation -------------------------------------------------------
@dataclass
class CoSearchResult:
    state: SupernetState
    lut: LatencyTable
    trajectory: Trajectory
    teacher: Derived
    student: Derived
    teacher_relaxed_ms: float
    student_relaxed_ms: float
    teacher_val: float
    student_val: float
    distilled_val: float
    scratch_logs: dict[str, Trajectory]
    seconds: float

    def summary(self) -> dict:
        return {
            "teacher": {
                "relaxed_latency_ms": self.teacher_relaxed_ms,
                "latency_ms": estimate_discrete(self.teacher.genotype, self.lut),
                "head_rates": list(self.teacher.genotype.head_rates),
                "val_mIoU": self.teacher_val,
            },
            "student": {
                "relaxed_latency_ms": self.student_relaxed_ms,
                "latency_ms": estimate_discrete(self.student.genotype, self.lut),
                "head_rates": list(self.student.genotype.head_rates),
                "val_mIoU": self.student_val,
                "distilled_val_mIoU": self.distilled_val,
            },
            "seconds": self.seconds,
        }


def train_pair(ws: Workspace, teacher_g: Genotype, student_g: Genotype):
    """Teacher from scratch, then the student with and without distillation (same seed and epochs)."""
    cfg = ws.config
    k = cfg.task.num_classes
    t_net, t_val, t_log = train_from_scratch(teacher_g, ws.data, cfg.hp, ws.space, k)
    _, s_val, s_log = train_from_scratch(student_g, ws.data, cfg.hp, ws.space, k)
    _, d_val, d_log = train_from_scratch(student_g, ws.data, cfg.hp, ws.space, k, teacher=t_net)
    return t_net, (t_val, s_val, d_val), {"teacher": t_log, "student": s_log, "distilled": d_log}


def cosearch_experiment(config: RunConfig) -> CoSearchResult:
    t0 = time.perf_counter()
    ws = Workspace.build(config)
    state, log = pretrained_state(ws, cosearch=True)
    teacher, student, search_log = co_search(state, ws.data, ws.lut)
    traj = Trajectory(log.rows + search_log.rows)
    t_der = derive_candidates(ws, teacher)
    s_der = derive_candidates(ws, student)
    _, (t_val, s_val, d_val), logs = train_pair(ws, t_der.genotype, s_der.genotype)
    return CoSearchResult(
        state, ws.lut, traj, t_der, s_der,
        estimate_relaxed(teacher, ws.lut).item(), estimate_relaxed(student, ws.lut).item(),
        t_val, s_val, d_val, logs, time.perf_counter() - t0,
    )


def write_json(path: str | Path, doc) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path

