"""Next-token pretraining of the all-softmax toy teacher on the synthetic task corpus."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import ConfigurationError
from .model import HybridPlan, Model, ModelConfig, build_model, forward
from .optim import AdamWHyper, AdamWState, adamw_step, clip_global_norm, warmup_cosine
from .tasks import TASKS, EvalHarness, corpus, task_accuracies


class ScoreFloorWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TeacherConfig:
    max_steps: int = 6000
    batch_size: int = 16
    seq_len: int = 32
    learning_rate: float = 3e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    score_floor: float = 90.0
    eval_every: int = 250
    corpus_seed: int = 0
    tasks: tuple[str, ...] = TASKS

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.max_steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigurationError("max_steps, batch_size and eval_every must be >= 1")
        if self.seq_len < 8:
            raise ConfigurationError("seq_len must be >= 8")
        if self.learning_rate <= 0 or self.grad_clip_norm <= 0:
            raise ConfigurationError("learning_rate and grad_clip_norm must be > 0")


@dataclass
class TeacherRecord:
    step: int
    loss: float
    score: float
    accuracies: dict[str, float]


@dataclass
class TeacherResult:
    model: Model
    history: list[TeacherRecord] = field(default_factory=list)
    reached_floor: bool = False

    @property
    def final_score(self) -> float:
        return self.history[-1].score if self.history else float("nan")


def train_teacher(model_cfg: ModelConfig, cfg: TeacherConfig, harness: EvalHarness) -> TeacherResult:
    """Train until the harness score exceeds ``cfg.score_floor`` (checked every ``eval_every``) or the step cap.

    Hitting the cap without reaching the floor only warns; the model is still returned.
    """
    if cfg.seq_len - 1 > model_cfg.max_seq_len:
        raise ConfigurationError(f"teacher seq_len {cfg.seq_len} needs max_seq_len >= {cfg.seq_len - 1}")
    model = build_model(model_cfg, HybridPlan.all_softmax(model_cfg.layer_count))
    params = list(model.params.values())
    state = AdamWState.for_params(params)
    hyper = AdamWHyper(weight_decay=cfg.weight_decay)
    data = corpus(cfg.max_steps * cfg.batch_size, cfg.seq_len, cfg.corpus_seed, harness.grammar_seed, cfg.tasks)
    result = TeacherResult(model)
    for step in range(1, cfg.max_steps + 1):
        batch = data[(step - 1) * cfg.batch_size:step * cfg.batch_size]
        loss = T.cross_entropy(forward(model, batch[:, :-1]).logits, batch[:, 1:])
        loss.backward()
        grads, _, _ = clip_global_norm([p.grad for p in params], cfg.grad_clip_norm)
        adamw_step(params, grads, state, warmup_cosine(step, cfg.learning_rate, cfg.warmup_steps, cfg.max_steps),
                   hyper)
        T.zero_grads(params)
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            accs = task_accuracies(model, harness)
            score = float(np.mean([accs[t] for t in harness.tasks]))
            result.history.append(TeacherRecord(step, loss.item(), score, accs))
            if score > cfg.score_floor:
                result.reached_floor = True
                break
    if not result.reached_floor:
        warnings.warn(f"teacher score {result.final_score:.2f} did not exceed floor {cfg.score_floor} "
                      f"within {cfg.max_steps} steps", ScoreFloorWarning, stacklevel=2)
    return result
