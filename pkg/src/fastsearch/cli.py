"""Command-line entry point: profile, search, cosearch, derive, train, report.

Precedence of settings, lowest first: the ``--preset`` entry of the bundled
presets file, then the JSON file given by ``--config`` (same nested layout),
then individual flags such as ``--seed`` or ``--epochs``.
"""
from __future__ import annotations

import os

_THREADS = os.environ.get("FASTSEARCH_THREADS")
if _THREADS:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _THREADS

import argparse  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, dataclass, field, replace  # noqa: E402
from datetime import datetime, timezone  # noqa: E402
from pathlib import Path  # noqa: E402

from .arch import ArchParams  # noqa: E402
from .derivation import validate_genotype  # noqa: E402
from .experiments import (  # noqa: E402
    MODES,
    RunConfig,
    Workspace,
    derive_candidates,
    deep_merge,
    load_presets,
    pretrained_state,
    write_json,
)
from .genotype import Genotype  # noqa: E402
from .latency import (  # noqa: E402
    SensitivityReport,
    estimate_discrete,
    estimate_relaxed,
    sensitivity_report,
    solve_regularizer_weights,
)
from .numerics.checkpoint import save_weights  # noqa: E402
from .report import architecture_svg, epoch_series, read_trajectory, trajectory_svg  # noqa: E402
from .search import DivergenceError, co_search, search, train_from_scratch  # noqa: E402


class CliError(Exception):
    """A user-facing failure; reported as JSON on stderr with exit code 2."""


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    seed: int
    input_hash: str
    out_dir: str
    started: str
    finished: str = ""
    artifacts: dict[str, str] = field(default_factory=dict)

    def add(self, path: Path) -> Path:
        self.artifacts[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()
        return path

    def save(self) -> Path:
        self.finished = _now()
        return write_json(Path(self.out_dir) / "manifest.json", asdict(self))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def content_hash(config: RunConfig, *paths: str | None) -> str:
    h = hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode())
    for p in paths:
        if p:
            try:
                h.update(Path(p).read_bytes())
            except OSError as exc:
                raise CliError(f"cannot read input {p}: {exc}") from exc
    return h.hexdigest()[:16]


# -- configuration ------------------------------------------------------------------
def resolve_config(args: argparse.Namespace) -> RunConfig:
    presets = load_presets()
    if args.preset not in presets:
        raise CliError(f"unknown preset {args.preset!r}")
    doc = presets[args.preset]
    if args.config:
        try:
            doc = deep_merge(doc, json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
    try:
        config = RunConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc
    if args.seed is not None:
        config = config.with_hp(seed=args.seed)
    return config


def start(args: argparse.Namespace, config: RunConfig, *inputs: str | None) -> tuple[Path, RunManifest]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(args.command, args.config, config.hp.seed, content_hash(config, *inputs),
                           str(out), _now())
    manifest.add(write_json(out / "config.json", config.to_dict()))
    return out, manifest


def parse_deltas(text: str) -> SensitivityReport:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise CliError(f"--deltas expects three numbers, got {text!r}") from exc
    if len(values) != 3:
        raise CliError(f"--deltas expects three numbers, got {len(values)}")
    return SensitivityReport(*values)


# -- commands ----------------------------------------------------------------------
def cmd_profile(args) -> dict:
    config = resolve_config(args)
    out, man = start(args, config)
    ws = Workspace.build(config)
    man.add(ws.lut.save(out / "lut.csv"))
    report = parse_deltas(args.deltas) if args.deltas else sensitivity_report(ws.space, ws.lut)
    man.add(write_json(out / "sensitivity.json", asdict(report)))
    weights = solve_regularizer_weights(report)
    doc = {"w1": weights.w1, "w2": weights.w2, "w3": weights.w3,
           "rounded": [round(w, 3) for w in (weights.w1, weights.w2, weights.w3)]}
    man.add(write_json(out / "weights.json", doc))
    man.save()
    return doc


def _search_config(args) -> RunConfig:
    config = resolve_config(args)
    if args.epochs is not None:
        config = config.with_hp(search_epochs=args.epochs)
    return config


def cmd_search(args) -> dict:
    config = _search_config(args)
    config = config.with_hp(weights_source=MODES[args.mode])
    out, man = start(args, config)
    ws = Workspace.build(config)
    state, pre_log = pretrained_state(ws)
    man.add(pre_log.save(out / "pretrain.csv"))
    state.save(out / "supernet")  # last good checkpoint if the search diverges
    state, log = search(state, ws.data, ws.lut)
    man.add(log.save(out / "trajectory.csv"))
    state.save(out / "supernet")
    man.add(state.student.save(out / "arch.json", state.rng.bit_generator.state))
    summary = {
        "mode": args.mode,
        "mean_ratio": state.student.mean_derived_ratio(),
        "val_mIoU": log.last("epoch", "val_mIoU"),
        "latency_ms": estimate_relaxed(state.student, ws.lut).item(),
    }
    man.add(write_json(out / "summary.json", summary))
    man.save()
    return summary


def cmd_cosearch(args) -> dict:
    config = _search_config(args)
    out, man = start(args, config)
    ws = Workspace.build(config)
    state, pre_log = pretrained_state(ws, cosearch=True)
    man.add(pre_log.save(out / "pretrain.csv"))
    state.save(out / "supernet")
    teacher, student, log = co_search(state, ws.data, ws.lut)
    man.add(log.save(out / "trajectory.csv"))
    state.save(out / "supernet")
    rng = state.rng.bit_generator.state
    man.add(teacher.save(out / "arch_teacher.json", rng))
    man.add(student.save(out / "arch_student.json", rng))
    summary = {
        "teacher_latency_ms": estimate_relaxed(teacher, ws.lut).item(),
        "student_latency_ms": estimate_relaxed(student, ws.lut).item(),
        "teacher_val_mIoU": log.last("epoch_teacher", "val_mIoU"),
        "student_val_mIoU": log.last("epoch_student", "val_mIoU"),
    }
    man.add(write_json(out / "summary.json", summary))
    man.save()
    return summary


def _load_arch(path: str) -> ArchParams:
    try:
        params, _ = ArchParams.load(path)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot load architecture checkpoint {path}: {exc}") from exc
    return params


def cmd_derive(args) -> dict:
    config = resolve_config(args)
    params = _load_arch(args.checkpoint)
    config = replace(config, space=params.space.config)
    out, man = start(args, config, args.checkpoint)
    ws = Workspace.build(config)
    derived = derive_candidates(ws, params, args.epochs)
    ranking = {}
    for cand, target in zip(derived.candidates, derived.targets):
        tag = "-".join(map(str, cand.genotype.head_rates))
        path = out / f"genotype_{tag}.json"
        path.write_text(cand.genotype.to_json())
        man.add(path)
        ranking[tag] = {"acc": cand.acc, "latency_ms": cand.lat, "target": target}
    best = out / "genotype.json"
    best.write_text(derived.genotype.to_json())
    man.add(best)
    doc = {"selected": list(derived.genotype.head_rates), "candidates": ranking}
    man.add(write_json(out / "targets.json", doc))
    man.save()
    return doc


def _load_genotype(path: str, ws: Workspace) -> Genotype:
    try:
        g = Genotype.load(path)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot load genotype {path}: {exc}") from exc
    problems = validate_genotype(g, ws.space, ws.lut)
    if problems:
        raise CliError(f"genotype {path} is invalid: " + "; ".join(problems))
    return g


def cmd_train(args) -> dict:
    config = resolve_config(args)
    if args.epochs is not None:
        config = config.with_hp(scratch_epochs=args.epochs)
    out, man = start(args, config, args.genotype, args.teacher)
    ws = Workspace.build(config)
    g = _load_genotype(args.genotype, ws)
    k = config.task.num_classes
    teacher_net, teacher_val = None, None
    if args.teacher:
        tg = _load_genotype(args.teacher, ws)
        teacher_net, teacher_val, t_log = train_from_scratch(tg, ws.data, config.hp, ws.space, k)
        man.add(t_log.save(out / "teacher_trajectory.csv"))
    net, val, log = train_from_scratch(g, ws.data, config.hp, ws.space, k, teacher=teacher_net)
    man.add(log.save(out / "trajectory.csv"))
    arrays = {f"p{i:04d}": p.data for i, p in enumerate(net.parameters())}
    for p in save_weights(out / "weights", arrays):
        man.add(p)
    metrics = {"val_mIoU": val, "latency_ms": estimate_discrete(g, ws.lut), "teacher_val_mIoU": teacher_val}
    man.add(write_json(out / "metrics.json", metrics))
    man.save()
    return metrics


def cmd_report(args) -> dict:
    run = Path(args.run)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    traj = run / "trajectory.csv"
    if not traj.exists():
        raise CliError(f"{traj} not found; report needs a finished search or cosearch run")
    series = epoch_series(read_trajectory(traj.read_text()))
    archs = {name: run / f"arch_{name}.json" for name in ("teacher", "student")}
    if not all(p.exists() for p in archs.values()):
        archs = {"searched": run / "arch.json"}
    summary: dict = {"run": str(run), "series": {k: len(v) for k, v in series.items()}}
    genotypes = {}
    for name, path in archs.items():
        if not path.exists():
            raise CliError(f"{path} not found")
        params = _load_arch(str(path))
        ws = Workspace.build(RunConfig(space=params.space.config))
        g = derive_candidates(ws, params, epochs=0).genotype
        genotypes[name] = g
        summary[name] = {
            "relaxed_latency_ms": estimate_relaxed(params, ws.lut).item(),
            "derived_latency_ms": estimate_discrete(g, ws.lut),
            "head_rates": list(g.head_rates),
            "mean_ratio": params.mean_derived_ratio(),
        }
    if "teacher" in summary:
        summary["student_not_slower"] = (
            summary["student"]["relaxed_latency_ms"] <= summary["teacher"]["relaxed_latency_ms"]
        )
    (out / "trajectory.svg").write_text(trajectory_svg(series, "validation mIoU vs latency per epoch"))
    (out / "architecture.svg").write_text(architecture_svg(genotypes))
    write_json(out / "summary.json", summary)
    return summary


COMMANDS = {
    "profile": cmd_profile,
    "search": cmd_search,
    "cosearch": cmd_cosearch,
    "derive": cmd_derive,
    "train": cmd_train,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastsearch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, epochs_help=None):
        p.add_argument("--preset", default="desk", help="bundled preset: desk or full")
        p.add_argument("--config", help="JSON file overriding preset values")
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("--out", required=True, help="output directory")
        if epochs_help:
            p.add_argument("--epochs", type=int, help=epochs_help)

    p = sub.add_parser("profile", help="latency table, sensitivity gaps and regularizer weights")
    common(p)
    p.add_argument("--deltas", help="override the measured gaps: a,b,c for operator, resolution, width")
    p = sub.add_parser("search", help="pretrain then search one architecture")
    common(p, "search epochs")
    p.add_argument("--mode", choices=sorted(MODES), default="decoupled")
    p = sub.add_parser("cosearch", help="pretrain then co-search teacher and student")
    common(p, "search epochs")
    p = sub.add_parser("derive", help="decode every rate pair and rank them")
    common(p, "training epochs per candidate when estimating accuracy (0: latency only)")
    p.add_argument("--checkpoint", required=True, help="architecture JSON written by search or cosearch")
    p = sub.add_parser("train", help="train a genotype from scratch, optionally distilling from a teacher")
    common(p, "training epochs")
    p.add_argument("--genotype", required=True)
    p.add_argument("--teacher", help="teacher genotype, trained first")
    p = sub.add_parser("report", help="SVG figures and summary for a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", help="defaults to the run directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = COMMANDS[args.command](args)
    except (CliError, DivergenceError, LookupError, ValueError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
