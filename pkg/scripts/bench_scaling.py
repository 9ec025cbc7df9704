"""Decode-latency scaling for the baseline plans plus a 12 softmax / 19 SWA / 5 identity mix over 36 layers."""

import argparse

from hybridlab.attention import LayerKind
from hybridlab.bench import baseline_plans, memory_model, run_scaling_bench, write_bench_csv
from hybridlab.model import HybridPlan, ModelConfig, build_model


def shaped_plan(window: int) -> HybridPlan:
    kinds = [LayerKind.softmax()] * 12 + [LayerKind.sliding(window)] * 19 + [LayerKind.identity()] * 5
    return HybridPlan(tuple(kinds), 12)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lengths", type=int, nargs="+", default=[256, 512, 1024, 2048, 4096])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--hidden-dim", type=int, default=128)
    ap.add_argument("--out", default="bench_scaling.csv")
    args = ap.parse_args()
    cfg = ModelConfig(layer_count=36, hidden_dim=args.hidden_dim, head_count=4, ffn_dim=4 * args.hidden_dim)
    model = build_model(cfg, HybridPlan.all_softmax(36))
    plans = baseline_plans(36, 64) + [("s12_w19_i5", shaped_plan(64))]
    report = run_scaling_bench(model, plans, args.lengths, repeats=args.repeats)
    write_bench_csv(report, args.out)
    for pid, plan in plans:
        ratio = report.ratio(pid, args.lengths[-1], args.lengths[0])
        print(f"{pid:14s} time({args.lengths[-1]})/time({args.lengths[0]}) = {ratio:.2f}")
    full = memory_model(HybridPlan.all_softmax(36), 8192, 2560, 2)
    mixed = memory_model(shaped_plan(64), 8192, 2560, 2)
    print(f"KV bytes at n=8192, d=2560, bf16: all-softmax {full / 2**30:.2f} GiB, mixed {mixed / 2**30:.2f} GiB "
          f"(ratio {mixed / full:.4f})")


if __name__ == "__main__":
    main()
