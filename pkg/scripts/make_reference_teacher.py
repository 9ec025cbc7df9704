"""Train the reference toy teacher shipped in tests/data from configs/default.ini."""

import argparse
from pathlib import Path

from hybridlab import tensor as T
from hybridlab.config import load_config
from hybridlab.model import save_checkpoint
from hybridlab.pretrain import train_teacher

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=ROOT / "configs" / "default.ini")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=ROOT / "tests" / "data" / "reference_teacher.ckpt")
    args = ap.parse_args()
    cfg = load_config(args.config, seed=args.seed)
    T.set_precision(cfg.precision)
    result = train_teacher(cfg.model, cfg.teacher, cfg.harness)
    save_checkpoint(result.model, args.out)
    last = result.history[-1]
    print(f"step {last.step}: score {last.score:.2f} {last.accuracies} -> {args.out}")


if __name__ == "__main__":
    main()
