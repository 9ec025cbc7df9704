"""Run the six CLI stages in order for one or more seeds and print the headline numbers."""

import argparse
import csv
import sys
from pathlib import Path

from hybridlab.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]
STAGES = ("train-teacher", "sensitivity", "search", "heal", "eval", "bench")


def run(config: Path, seed: int, out: Path, skip_bench: bool) -> None:
    for stage in STAGES:
        if stage == "bench" and skip_bench:
            continue
        code = cli([stage, "--config", str(config), "--seed", str(seed), "--out", str(out), "-v"])
        if code:
            sys.exit(f"{stage} failed with exit code {code}")
    with open(out / "scores.csv") as fh:
        means = {r["checkpoint"]: float(r["accuracy"]) for r in csv.DictReader(fh) if r["task"] == "mean"}
    plan = (out / "plan.txt").read_text().strip()
    print(f"seed {seed}: plan {plan}; teacher {means['teacher.ckpt']:.2f}, healed {means['healed.ckpt']:.2f}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "default.ini")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--out", type=Path, default=ROOT / "runs")
    ap.add_argument("--skip-bench", action="store_true")
    args = ap.parse_args()
    for seed in args.seeds:
        run(args.config, seed, args.out / f"seed{seed}", args.skip_bench)


if __name__ == "__main__":
    main()
