"""``hybridlab`` command line: train-teacher, sensitivity, search, heal, eval, bench.

Every command takes ``--config``, ``--seed`` and ``--out``; inputs default to the
fixed filenames earlier stages write under ``--out``. Exit status is 0 on success,
1 for configuration or user errors and 2 when an internal invariant fails.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import ConfigurationError
from .bench import CapacityError, baseline_plans, run_scaling_bench, write_bench_csv
from .config import PipelineConfig, load_config, stage_seed
from .healing import (DataUnderflowError, PairingError, TeacherStudentPair, heal, make_student, mean_attention_kl,
                      write_heal_log)
from .model import HybridPlan, ModelConfig, StateError, build_model, load_checkpoint, parameter_hash, save_checkpoint
from .pretrain import train_teacher
from .sensitivity import (budgeted_search, read_plan, read_sensitivity_csv, sensitivity_scan, softmax_budget,
                          write_plan, write_search_log, write_sensitivity_csv)
from .tasks import corpus, task_accuracies

log = logging.getLogger("hybridlab")

TEACHER_CKPT = "teacher.ckpt"
TEACHER_LOG = "teacher_log.csv"
SENSITIVITY_CSV = "sensitivity.csv"
PLAN_TXT = "plan.txt"
SEARCH_LOG = "search_log.csv"
HEALED_CKPT = "healed.ckpt"
HEAL_LOG = "heal_log.csv"
SCORES_CSV = "scores.csv"
BENCH_CSV = "bench.csv"


class InvariantError(RuntimeError):
    pass


def _teacher(args, out: Path):
    return load_checkpoint(Path(args.teacher) if args.teacher else out / TEACHER_CKPT)


def cmd_train_teacher(cfg: PipelineConfig, args, out: Path) -> None:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = train_teacher(cfg.model, cfg.teacher, cfg.harness)
    for w in caught:
        log.warning("%s", w.message)
    save_checkpoint(result.model, out / TEACHER_CKPT)
    with open(out / TEACHER_LOG, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "score", *cfg.harness.tasks])
        for r in result.history:
            w.writerow([r.step, repr(r.loss), repr(r.score), *(repr(r.accuracies[t]) for t in cfg.harness.tasks)])
    log.info("teacher score %.2f after %d steps", result.final_score, result.history[-1].step)


def cmd_sensitivity(cfg: PipelineConfig, args, out: Path) -> None:
    teacher = _teacher(args, out)
    before = parameter_hash(teacher.params)
    report = sensitivity_scan(teacher, cfg.harness)
    if parameter_hash(teacher.params) != before:
        raise InvariantError("sensitivity scan modified the model parameters")
    write_sensitivity_csv(report, out / SENSITIVITY_CSV)
    log.info("base score %.2f; high group %s", report.base_score, list(report.grouping.high))


def cmd_search(cfg: PipelineConfig, args, out: Path) -> None:
    teacher = _teacher(args, out)
    report = read_sensitivity_csv(Path(args.sensitivity) if args.sensitivity else out / SENSITIVITY_CSV)
    if len(report.entries) != teacher.cfg.layer_count:
        raise ConfigurationError(f"sensitivity file has {len(report.entries)} layers, "
                                 f"teacher has {teacher.cfg.layer_count}")
    result = budgeted_search(teacher, report, cfg.search, cfg.harness)
    budget = softmax_budget(teacher.cfg.layer_count, cfg.search.softmax_budget_fraction)
    if result.plan.softmax_count > budget:
        raise InvariantError(f"searched plan uses {result.plan.softmax_count} softmax layers, budget {budget}")
    write_plan(result.plan, out / PLAN_TXT)
    write_search_log(result.log, out / SEARCH_LOG)
    log.info("plan %s score %.2f (initial %.2f)", result.plan.to_text(), result.final_score, result.initial_score)


def cmd_heal(cfg: PipelineConfig, args, out: Path) -> None:
    teacher = _teacher(args, out)
    plan = read_plan(Path(args.plan) if args.plan else out / PLAN_TXT)
    student = make_student(teacher, plan, cfg.lora)
    pair = TeacherStudentPair(teacher, student)
    hcfg = cfg.healing
    count = hcfg.total_steps * hcfg.batch_size * hcfg.grad_accum_steps
    data = corpus(count, hcfg.seq_len, stage_seed(cfg.seed, "heal-data"), cfg.harness.grammar_seed, cfg.teacher.tasks)
    before = parameter_hash(student.params)
    result = heal(pair, data, hcfg, checkpoint_dir=out)
    if parameter_hash(student.params) != before:
        raise InvariantError("healing modified frozen base parameters")
    save_checkpoint(student, out / HEALED_CKPT)
    write_heal_log(result.log, out / HEAL_LOG)
    probe = corpus(64, hcfg.seq_len, stage_seed(cfg.seed, "heal-probe"), cfg.harness.grammar_seed, cfg.teacher.tasks)
    log.info("healed %d steps; final loss %.4f; probe attention KL %.5f", len(result.log),
             result.log[-1].loss_total, mean_attention_kl(pair, probe))


def cmd_eval(cfg: PipelineConfig, args, out: Path) -> None:
    paths = [Path(p) for p in args.checkpoint] if args.checkpoint else \
        [p for p in (out / TEACHER_CKPT, out / HEALED_CKPT) if p.exists()]
    if not paths:
        raise ConfigurationError(f"no checkpoint given and none found in {out}")
    with open(out / SCORES_CSV, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["checkpoint", "plan", "task", "accuracy"])
        for p in paths:
            model = load_checkpoint(p)
            accs = task_accuracies(model, cfg.harness)
            for t in cfg.harness.tasks:
                w.writerow([p.name, model.plan.to_text(), t, repr(accs[t])])
            w.writerow([p.name, model.plan.to_text(), "mean", repr(float(np.mean([accs[t] for t in cfg.harness.tasks])))])


def cmd_bench(cfg: PipelineConfig, args, out: Path) -> None:
    b = cfg.bench
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        dims = ModelConfig(layer_count=cfg.model.layer_count, hidden_dim=b.hidden_dim, head_count=b.head_count,
                           ffn_dim=b.ffn_dim, vocab_size=cfg.model.vocab_size, max_seq_len=cfg.model.max_seq_len,
                           rng_seed=stage_seed(cfg.seed, "bench-weights"))
        model = build_model(dims, HybridPlan.all_softmax(dims.layer_count))
    plans = baseline_plans(model.cfg.layer_count, cfg.bench.window)
    plan_path = Path(args.plan) if args.plan else out / PLAN_TXT
    if args.plan or plan_path.exists():
        plans.append(("searched", read_plan(plan_path)))
    report = run_scaling_bench(model, plans, cfg.bench.lengths, cfg.bench.repeats, cfg.bench.tokens_per_point,
                               seed=stage_seed(cfg.seed, "bench"), parallel=cfg.bench.parallel)
    for r in report.rows:
        if r.measured_kv_entries != r.modeled_kv_entries:
            raise InvariantError(f"{r.plan} at n={r.seq_len}: measured {r.measured_kv_entries} cache entries, "
                                 f"modeled {r.modeled_kv_entries}")
    write_bench_csv(report, out / BENCH_CSV)


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "sensitivity": cmd_sensitivity,
    "search": cmd_search,
    "heal": cmd_heal,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="pipeline INI file")
        p.add_argument("--seed", type=int, default=None, help="override [pipeline] seed")
        p.add_argument("--out", default=None, help="output directory (default: [pipeline] out_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("sensitivity", "search", "heal"):
            p.add_argument("--teacher", help=f"teacher checkpoint (default: OUT/{TEACHER_CKPT})")
        if name == "search":
            p.add_argument("--sensitivity", help=f"sensitivity CSV (default: OUT/{SENSITIVITY_CSV})")
        if name in ("heal", "bench"):
            p.add_argument("--plan", help=f"plan file (default: OUT/{PLAN_TXT})")
        if name == "eval":
            p.add_argument("--checkpoint", action="append", help="checkpoint to score; repeatable")
        if name == "bench":
            p.add_argument("--checkpoint", help="weights to decode with (default: random weights, [bench] dims)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed)
        T.set_precision(cfg.precision)
        out = Path(args.out or cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args, out)
    except (InvariantError, StateError, CapacityError, T.DegenerateRowError, T.DistributionError,
            T.GraphReuseError) as exc:
        print(f"hybridlab {args.command}: invariant violated: {exc}", file=sys.stderr)
        return 2
    except (ConfigurationError, PairingError, DataUnderflowError, OSError, ValueError) as exc:
        print(f"hybridlab {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
