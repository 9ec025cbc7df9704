"""Per-layer attention-ablation sensitivity and the budget-constrained plan search."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .attention import ConfigurationError, LayerKind
from .model import HybridPlan, Model, swap_layer_kind, with_plan
from .tasks import EvalHarness, evaluate, task_accuracies

RANDOM_GUESS = 50.0
SENSITIVITY_FIELDS = ("layer", "ablated_score", "sensitivity", "group")
SEARCH_FIELDS = ("layer", "kind_before", "kind_after", "score", "decision")


@dataclass(frozen=True)
class SensitivityEntry:
    layer: int
    ablated_score: float
    sensitivity: float


@dataclass(frozen=True)
class Grouping:
    high: tuple[int, ...]
    moderate: tuple[int, ...]
    low: tuple[int, ...]
    t_high: float
    t_low: float

    def group_of(self, layer: int) -> str:
        if layer in self.high:
            return "high"
        if layer in self.low:
            return "low"
        return "moderate"


@dataclass
class SensitivityReport:
    base_score: float
    entries: list[SensitivityEntry]
    grouping: Grouping

    @property
    def scores(self) -> dict[int, float]:
        return {e.layer: e.sensitivity for e in self.entries}

    def by_sensitivity(self, descending: bool = False) -> list[int]:
        """Layer indices ordered by sensitivity; ties go to the lower index."""
        sign = -1.0 if descending else 1.0
        return [e.layer for e in sorted(self.entries, key=lambda e: (sign * e.sensitivity, e.layer))]


def percentile_thresholds(sensitivities, high_pct: float = 67.0, low_pct: float = 33.0) -> tuple[float, float]:
    s = np.asarray(list(sensitivities), dtype=np.float64)
    return float(np.percentile(s, high_pct)), float(np.percentile(s, low_pct))


def group_layers(report: SensitivityReport | dict[int, float], thresholds: tuple[float, float]) -> Grouping:
    """high: S >= t_high, low: S <= t_low, moderate: the rest. High wins when both hold."""
    t_high, t_low = thresholds
    if not t_high >= t_low >= 0:
        raise ConfigurationError(f"need t_high >= t_low >= 0, got ({t_high}, {t_low})")
    scores = report.scores if isinstance(report, SensitivityReport) else report
    high, moderate, low = [], [], []
    for layer in sorted(scores):
        s = scores[layer]
        if s >= t_high:
            high.append(layer)
        elif s <= t_low:
            low.append(layer)
        else:
            moderate.append(layer)
    return Grouping(tuple(high), tuple(moderate), tuple(low), float(t_high), float(t_low))


def sensitivity_scan(model: Model, harness: EvalHarness, thresholds: tuple[float, float] | None = None,
                     score_fn: Callable[[Model, EvalHarness], float] = evaluate) -> SensitivityReport:
    """Ablate each layer's attention in turn (identity) and record the score drop.

    Ablations are transient views; the model's own plan and parameters are untouched.
    Default thresholds are the 67th/33rd percentiles of the sensitivities, floored at 0.
    """
    if score_fn is evaluate:
        accs = task_accuracies(model, harness)
        if max(accs.values()) <= RANDOM_GUESS:
            raise ConfigurationError(f"model is at or below random guessing on every task: {accs}")
        base = float(np.mean([accs[t] for t in harness.tasks]))
    else:
        base = score_fn(model, harness)
    entries = []
    for layer in range(model.cfg.layer_count):
        ablated = swap_layer_kind(model, layer, LayerKind.identity())
        score = score_fn(ablated, harness)
        entries.append(SensitivityEntry(layer, score, base - score))
    if thresholds is None:
        hi, lo = percentile_thresholds(e.sensitivity for e in entries)
        thresholds = (max(hi, 0.0), max(lo, 0.0))
    grouping = group_layers({e.layer: e.sensitivity for e in entries}, thresholds)
    return SensitivityReport(base, entries, grouping)


@dataclass(frozen=True)
class SearchConfig:
    softmax_budget_fraction: float = 1.0 / 3.0
    swa_window: int = 64
    regression_tolerance: float = 1.0
    max_candidate_evals: int = 10_000

    def __post_init__(self):
        if not 0.0 < self.softmax_budget_fraction <= 1.0:
            raise ConfigurationError("softmax_budget_fraction must lie in (0, 1]")
        if self.regression_tolerance < 0:
            raise ConfigurationError("regression_tolerance must be >= 0")
        if self.swa_window < 1:
            raise ConfigurationError("swa_window must be >= 1")
        if self.max_candidate_evals < 0:
            raise ConfigurationError("max_candidate_evals must be >= 0")


def softmax_budget(layer_count: int, fraction: float) -> int:
    """Round half up: 1/3 of 36 layers gives 12, of 8 layers gives 3."""
    return int(math.floor(fraction * layer_count + 0.5))


@dataclass
class SearchStep:
    layer: int
    kind_before: str
    kind_after: str
    score: float
    decision: str


@dataclass
class SearchResult:
    plan: HybridPlan
    log: list[SearchStep] = field(default_factory=list)
    initial_score: float = float("nan")
    final_score: float = float("nan")
    evaluations: int = 0


def initial_plan(report: SensitivityReport, layer_count: int, budget: int, window: int) -> HybridPlan:
    top = set(report.by_sensitivity(descending=True)[:budget])
    kinds = tuple(LayerKind.softmax() if l in top else LayerKind.sliding(window) for l in range(layer_count))
    return HybridPlan(kinds, budget)


def budgeted_search(model: Model, report: SensitivityReport, cfg: SearchConfig, harness: EvalHarness,
                    score_fn: Callable[[Model, EvalHarness], float] = evaluate) -> SearchResult:
    """Sensitivity-guided search under a softmax budget.

    1. Top-``B`` layers by sensitivity keep softmax; every other layer becomes sliding-window.
    2. One swap pass: each initial softmax layer (least sensitive first) may hand its softmax
       slot to a high-group layer that lacks one, if that strictly raises the score.
    3. Layers still on sliding-window are tried as identity in ascending sensitivity; a change
       is kept iff the score drops by at most ``regression_tolerance`` from the current plan.
    """
    L = model.cfg.layer_count
    if sorted(e.layer for e in report.entries) != list(range(L)):
        raise ConfigurationError("sensitivity report must cover every layer exactly once")
    budget = softmax_budget(L, cfg.softmax_budget_fraction)
    if budget < 1:
        raise ConfigurationError(f"softmax budget rounds to {budget}; need >= 1")

    plan = initial_plan(report, L, budget, cfg.swa_window)
    current = score_fn(with_plan(model, plan), harness)
    result = SearchResult(plan, [], current, current, 0)
    window = LayerKind.sliding(cfg.swa_window)

    def budget_left() -> bool:
        return result.evaluations < cfg.max_candidate_evals

    sens = report.scores
    initial_softmax = sorted(plan.softmax_layers, key=lambda l: (sens[l], l))
    promotable = [l for l in report.by_sensitivity(descending=True)
                  if l in report.grouping.high and not plan[l].is_softmax]
    for s in initial_softmax:
        for c in promotable:
            if not budget_left() or plan[c].is_softmax:
                continue
            candidate = plan.with_kind(s, window).with_kind(c, LayerKind.softmax())
            score = score_fn(with_plan(model, candidate), harness)
            result.evaluations += 1
            keep = score > current
            decision = "keep" if keep else "revert"
            result.log.append(SearchStep(c, plan[c].token(), "S", score, decision))
            result.log.append(SearchStep(s, "S", window.token(), score, decision))
            if keep:
                plan, current = candidate, score
                break

    for layer in report.by_sensitivity():
        if not budget_left():
            break
        if not plan[layer].is_window:
            continue
        candidate = plan.with_kind(layer, LayerKind.identity())
        score = score_fn(with_plan(model, candidate), harness)
        result.evaluations += 1
        keep = score >= current - cfg.regression_tolerance
        result.log.append(SearchStep(layer, plan[layer].token(), "I", score, "keep" if keep else "revert"))
        if keep:
            plan, current = candidate, score

    result.plan = plan
    result.final_score = current
    return result


def uniform_plan(reference: HybridPlan) -> HybridPlan:
    """Same per-kind counts as ``reference``, dealt round-robin by layer index (S, W, I, S, ...)."""
    order = []
    for kind in (LayerKind.softmax(),) + tuple(sorted({k for k in reference.kinds if k.is_window},
                                                      key=lambda k: k.window)) + (LayerKind.identity(),):
        if kind in reference.kinds:
            order.append(kind)
    remaining = {k: reference.kinds.count(k) for k in order}
    kinds = []
    i = 0
    while len(kinds) < len(reference):
        kind = order[i % len(order)]
        if remaining[kind]:
            kinds.append(kind)
            remaining[kind] -= 1
        i += 1
    return HybridPlan(tuple(kinds), reference.softmax_budget)


# files ------------------------------------------------------------------------

def write_sensitivity_csv(report: SensitivityReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SENSITIVITY_FIELDS)
        for e in report.entries:
            w.writerow([e.layer, repr(e.ablated_score), repr(e.sensitivity), report.grouping.group_of(e.layer)])


def read_sensitivity_csv(path) -> SensitivityReport:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SENSITIVITY_FIELDS:
            raise ConfigurationError(f"{path}: expected columns {','.join(SENSITIVITY_FIELDS)}")
        rows = list(reader)
    entries = [SensitivityEntry(int(r["layer"]), float(r["ablated_score"]), float(r["sensitivity"])) for r in rows]
    groups = {g: tuple(int(r["layer"]) for r in rows if r["group"] == g) for g in ("high", "moderate", "low")}
    sens = [e.sensitivity for e in entries]
    t_high = min((s for e, s in zip(entries, sens) if e.layer in groups["high"]), default=math.inf)
    t_low = max((s for e, s in zip(entries, sens) if e.layer in groups["low"]), default=0.0)
    base = entries[0].ablated_score + entries[0].sensitivity if entries else float("nan")
    return SensitivityReport(base, entries, Grouping(groups["high"], groups["moderate"], groups["low"],
                                                     t_high, max(t_low, 0.0)))


def write_search_log(log: list[SearchStep], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SEARCH_FIELDS)
        for s in log:
            w.writerow([s.layer, s.kind_before, s.kind_after, repr(s.score), s.decision])


def write_plan(plan: HybridPlan, path) -> None:
    Path(path).write_text(plan.to_text() + "\n")


def read_plan(path, softmax_budget: int | None = None) -> HybridPlan:
    return HybridPlan.parse(Path(path).read_text(), softmax_budget)
