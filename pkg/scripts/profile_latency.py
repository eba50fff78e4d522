"""Print the regularizer weights solved from the synthetic cost model, next to a user-supplied gap triple."""
import argparse
import json

from fastsearch.experiments import Workspace, run_config
from fastsearch.latency import SensitivityReport, sensitivity_report, solve_regularizer_weights


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="full")
    ap.add_argument("--deltas", default="10.42,0.01,5.54", help="operator,resolution,width gaps")
    args = ap.parse_args()
    ws = Workspace.build(run_config(args.preset))
    measured = sensitivity_report(ws.space, ws.lut)
    given = SensitivityReport(*map(float, args.deltas.split(",")))
    out = {}
    for name, rep in (("synthetic", measured), ("given", given)):
        w = solve_regularizer_weights(rep).as_tuple()
        out[name] = {"deltas": rep.as_tuple(), "weights": w, "rounded": [round(x, 3) for x in w]}
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
