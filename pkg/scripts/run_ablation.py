#!/usr/bin/env python3
"""Feature ablation on the accident scenario: which channel drop hurts most?

    python3 scripts/run_ablation.py --seeds 0 1 2 --out results/ablation
"""

import argparse
from pathlib import Path

from ttformer.experiments import ablation_experiment, load_json
from ttformer.training import VARIANTS, write_table_csv

ROOT = Path(__file__).resolve().parent.parent / "configs"
DROPS = ("drop_culture", "drop_term_frequency", "drop_accident")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--scenario", default=ROOT / "accident_scenario.json")
    ap.add_argument("--model", default=ROOT / "model.json")
    ap.add_argument("--train", default=ROOT / "train_accident.json")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    ap.add_argument("--out", type=Path, default=Path("results/ablation"))
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        reps = ablation_experiment(load_json(args.scenario), load_json(args.model), load_json(args.train), seed,
                                   args.variants)
        for v, rep in reps.items():
            rows.append({"seed": seed, "variant": v, "mse": rep.mse, "mae": rep.mae, "mape": rep.mape})
        drops = {v: reps[v].mse for v in DROPS if v in reps}
        worst = max(drops, key=drops.get) if drops else "-"
        print(f"seed {seed}: " + "  ".join(f"{v} {r.mse:.5f}" for v, r in reps.items()) + f"  worst drop: {worst}",
              flush=True)
    with open(args.out / "ablation_seeds.csv", "w", newline="") as fh:
        write_table_csv(fh, rows, ("seed", "variant", "mse", "mae", "mape"))


if __name__ == "__main__":
    main()
