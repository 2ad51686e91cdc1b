#!/usr/bin/env python3
"""Train and evaluate the forecaster against the baselines over several seeds.

    python3 scripts/run_forecast.py --seeds 0 1 2 --out results/forecast
"""

import argparse
import json
from pathlib import Path

from ttformer.experiments import forecast_experiment, load_json
from ttformer.training import write_table_csv

ROOT = Path(__file__).resolve().parent.parent / "configs"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--scenario", default=ROOT / "standard_scenario.json")
    ap.add_argument("--model", default=ROOT / "model.json")
    ap.add_argument("--train", default=ROOT / "train_standard.json")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", type=Path, default=Path("results/forecast"))
    ap.add_argument("--verbose", action="store_true", help="print per-epoch losses")
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    rows, full = [], {}
    for seed in args.seeds:
        run = forecast_experiment(load_json(args.scenario), load_json(args.model), load_json(args.train), seed,
                                  log=print if args.verbose else None)
        m = run.mse_at(12)
        print(f"seed {seed}: h12 mse ttformer {m['ttformer']:.5f}  persistence {m['persistence']:.5f}  "
              f"seasonal {m['seasonal_mean']:.5f}  (best epoch {run.best_epoch}, {run.seconds:.0f}s)", flush=True)
        for name, rep in run.reports.items():
            rows.extend(dict(r, seed=seed) for r in rep.table_rows(name))
        full[str(seed)] = {name: rep.to_dict() for name, rep in run.reports.items()}
    with open(args.out / "forecast_metrics.csv", "w", newline="") as fh:
        write_table_csv(fh, rows, ("seed", "model", "horizon", "mse", "mae", "mape"))
    (args.out / "forecast_metrics.json").write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
