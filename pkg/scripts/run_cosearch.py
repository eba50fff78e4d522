"""Teacher/student co-search, branch selection and distillation on a preset."""
import argparse
import json
from pathlib import Path

from fastsearch.experiments import cosearch_experiment, run_config, write_json


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="runs/cosearch")
    args = ap.parse_args()
    overrides = {"search": {"seed": args.seed}} if args.seed is not None else None
    result = cosearch_experiment(run_config(args.preset, overrides))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.trajectory.save(out / "trajectory.csv")
    for name, log in result.scratch_logs.items():
        log.save(out / f"scratch_{name}.csv")
    for name, derived in (("teacher", result.teacher), ("student", result.student)):
        (out / f"genotype_{name}.json").write_text(derived.genotype.to_json())
    summary = result.summary()
    summary["distillation_helped"] = result.distilled_val >= result.student_val
    write_json(out / "summary.json", summary)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
