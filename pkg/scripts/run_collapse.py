"""Naive versus decoupled latency regularization from one shared pretraining, on a preset."""
import argparse
import json
from pathlib import Path

from fastsearch.experiments import collapse_experiment, run_config, write_json


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="runs/collapse")
    args = ap.parse_args()
    overrides = {"search": {"seed": args.seed}} if args.seed is not None else None
    result = collapse_experiment(run_config(args.preset, overrides))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for arm in (result.naive, result.decoupled):
        arm.trajectory.save(out / f"trajectory_{arm.mode}.csv")
        arm.state.student.save(out / f"arch_{arm.mode}.json")
    summary = result.summary()
    summary["collapse_reproduced"] = (result.naive.mean_ratio < result.decoupled.mean_ratio
                                      and result.decoupled.val > result.naive.val)
    write_json(out / "summary.json", summary)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
