"""Distillation healing: frozen softmax teacher, hybrid student, LoRA-only updates.

The objective per micro-batch is ``CE(next token) + lambda * attn_KL`` where ``attn_KL``
is the row-wise KL(teacher || student) averaged over heads and rows, then averaged
(default) or summed over the layers that keep softmax attention in the student.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import ConfigurationError
from .model import (HybridPlan, LoraConfig, Model, attach_lora, copy_model, forward, parameter_hash,
                    save_checkpoint, trainable_parameters)
from .optim import AdamWHyper, AdamWState, adamw_step, clip_global_norm, warmup_cosine

LOG_FIELDS = ("step", "tokens_seen", "loss_total", "loss_ce", "loss_attn", "grad_norm", "lr")


class PairingError(ValueError):
    pass


class DataUnderflowError(RuntimeError):
    pass


@dataclass(frozen=True)
class HealingConfig:
    distill_weight: float = 0.5
    learning_rate: float = 1e-4
    warmup_steps: int = 500
    grad_clip_norm: float = 1.0
    batch_size: int = 2
    grad_accum_steps: int = 8
    token_budget: int = 40_000_000
    seq_len: int = 1024
    checkpoint_token_marks: tuple[int, ...] = (10_000_000, 20_000_000, 40_000_000, 70_000_000)
    layer_reduction: str = "mean"
    adamw: AdamWHyper = AdamWHyper()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "checkpoint_token_marks", tuple(int(m) for m in self.checkpoint_token_marks))
        if self.distill_weight < 0:
            raise ConfigurationError("distill_weight (lambda) must be >= 0")
        if self.grad_clip_norm <= 0:
            raise ConfigurationError("grad_clip_norm must be > 0")
        if self.token_budget <= 0:
            raise ConfigurationError("token_budget must be > 0")
        if self.layer_reduction not in ("mean", "sum"):
            raise ConfigurationError(f"layer_reduction must be 'mean' or 'sum', got {self.layer_reduction!r}")
        if self.batch_size < 1 or self.grad_accum_steps < 1 or self.seq_len < 2:
            raise ConfigurationError("batch_size, grad_accum_steps must be >= 1 and seq_len >= 2")

    @property
    def tokens_per_step(self) -> int:
        return self.batch_size * self.grad_accum_steps * self.seq_len

    @property
    def total_steps(self) -> int:
        return -(-self.token_budget // self.tokens_per_step)


def lr_at(step: int, cfg: HealingConfig) -> float:
    return warmup_cosine(step, cfg.learning_rate, cfg.warmup_steps, cfg.total_steps)


@dataclass
class TeacherStudentPair:
    teacher: Model
    student: Model

    def __post_init__(self):
        a, b = self.teacher.cfg, self.student.cfg
        for name in ("vocab_size", "hidden_dim", "layer_count", "head_count", "ffn_dim"):
            if getattr(a, name) != getattr(b, name):
                raise PairingError(f"teacher/student {name} differ: {getattr(a, name)} vs {getattr(b, name)}")
        if not all(k.is_softmax for k in self.teacher.plan.kinds):
            raise PairingError("teacher must use softmax attention in every layer")

    @property
    def shared_layers(self) -> tuple[int, ...]:
        return self.student.plan.softmax_layers


def make_student(teacher: Model, plan: HybridPlan, lora_cfg: LoraConfig) -> Model:
    """Copy the teacher's weights, switch to ``plan`` and attach adapters."""
    student = copy_model(teacher, plan)
    attach_lora(student, lora_cfg)
    return student


def attention_kl(teacher_traces, student_traces, layers, reduction: str = "mean") -> T.Tensor:
    """Head- and row-averaged KL(teacher || student), averaged or summed over ``layers``."""
    if not layers:
        return T.Tensor(0.0)
    total = None
    for l in layers:
        p = teacher_traces[l].weights
        q = student_traces[l].weights
        n = p.shape[-1]
        kl = T.kl_rows(p.reshape(-1, n), q.reshape(-1, n))
        total = kl if total is None else total + kl
    return total * (1.0 / len(layers)) if reduction == "mean" else total


def healing_losses(pair: TeacherStudentPair, batch: np.ndarray, distill_weight: float, dropout_rng=None,
                   reduction: str = "mean"):
    """``(total, ce, attn)`` tensors for one micro-batch of full sequences ``[b, seq_len]``."""
    batch = np.asarray(batch, dtype=np.int64)
    inputs, targets = batch[:, :-1], batch[:, 1:]
    layers = pair.shared_layers
    with T.no_grad():
        t_out = forward(pair.teacher, inputs, trace_layers=layers)
    s_out = forward(pair.student, inputs, trace_layers=layers, dropout_rng=dropout_rng)
    ce = T.cross_entropy(s_out.logits, targets)
    attn = attention_kl(t_out.traces, s_out.traces, layers, reduction)
    total = ce + attn * distill_weight if distill_weight else ce
    return total, ce, attn


@dataclass
class StepReport:
    step: int
    tokens_seen: int
    loss_total: float
    loss_ce: float
    loss_attn: float
    grad_norm: float
    lr: float


class HealingTrainer:
    """Owns the student's adapters and optimizer state for one healing run."""

    def __init__(self, pair: TeacherStudentPair, cfg: HealingConfig):
        self.pair = pair
        self.cfg = cfg
        self.params = trainable_parameters(pair.student)
        self.state = AdamWState.for_params(self.params)
        self.rng = np.random.default_rng([cfg.seed, 5])
        self.step_count = 0
        self.tokens_seen = 0

    def step(self, batch: np.ndarray) -> StepReport:
        """One optimizer step over ``grad_accum_steps`` micro-batches of ``batch_size`` rows."""
        cfg = self.cfg
        batch = np.asarray(batch, dtype=np.int64)
        if batch.shape[-1] - 1 > self.pair.student.cfg.max_seq_len:
            raise ConfigurationError("batch sequences exceed the model's max_seq_len")
        micro = np.array_split(batch, min(cfg.grad_accum_steps, len(batch)))
        T.zero_grads(self.params)
        totals = np.zeros(3)
        for mb in micro:
            total, ce, attn = healing_losses(self.pair, mb, cfg.distill_weight, self.rng, cfg.layer_reduction)
            (total * (1.0 / len(micro))).backward()
            totals += [total.item(), ce.item(), attn.item()]
        grads, _, norm = clip_global_norm([p.grad for p in self.params], cfg.grad_clip_norm)
        self.step_count += 1
        lr = lr_at(self.step_count, cfg)
        adamw_step(self.params, grads, self.state, lr, cfg.adamw)
        T.zero_grads(self.params)
        self.tokens_seen += int(batch.size)
        totals /= len(micro)
        return StepReport(self.step_count, self.tokens_seen, float(totals[0]), float(totals[1]),
                          float(totals[2]), norm, lr)


@dataclass
class HealCheckpoint:
    token_mark: int
    tokens_seen: int
    path: Path | None
    frozen_hash: str


@dataclass
class HealResult:
    student: Model
    log: list[StepReport] = field(default_factory=list)
    checkpoints: list[HealCheckpoint] = field(default_factory=list)


def frozen_hash(model: Model) -> str:
    return parameter_hash(model.params)


def heal(pair: TeacherStudentPair, data: np.ndarray, cfg: HealingConfig, checkpoint_dir=None) -> HealResult:
    """Run healing steps until ``cfg.token_budget`` tokens are consumed.

    ``data`` is a token stream (1-D) or ready-made sequences ``[count, seq_len]``.
    """
    data = np.asarray(data, dtype=np.int64)
    seqs = data.reshape(-1, cfg.seq_len) if data.ndim == 1 else data
    if seqs.shape[1] != cfg.seq_len:
        raise ConfigurationError(f"data sequences have length {seqs.shape[1]}, config says {cfg.seq_len}")
    trainer = HealingTrainer(pair, cfg)
    result = HealResult(pair.student)
    per_step = cfg.batch_size * cfg.grad_accum_steps
    marks = sorted(cfg.checkpoint_token_marks)
    cursor = 0
    while trainer.tokens_seen < cfg.token_budget:
        if cursor + per_step > len(seqs):
            raise DataUnderflowError(f"data exhausted after {trainer.tokens_seen} tokens; "
                                     f"budget is {cfg.token_budget}")
        result.log.append(trainer.step(seqs[cursor:cursor + per_step]))
        cursor += per_step
        while marks and marks[0] <= trainer.tokens_seen:
            mark = marks.pop(0)
            path = None
            if checkpoint_dir is not None:
                path = Path(checkpoint_dir) / f"healed_{mark}.ckpt"
                save_checkpoint(pair.student, path)
            result.checkpoints.append(HealCheckpoint(mark, trainer.tokens_seen, path, frozen_hash(pair.student)))
    return result


def mean_attention_kl(pair: TeacherStudentPair, sequences: np.ndarray, batch_size: int = 32) -> float:
    """Evaluation-mode attention KL on ``sequences`` (no dropout, no gradients)."""
    vals, weights = [], []
    with T.no_grad():
        for s in range(0, len(sequences), batch_size):
            chunk = np.asarray(sequences[s:s + batch_size])[:, :-1]
            t_out = forward(pair.teacher, chunk, trace_layers=pair.shared_layers)
            s_out = forward(pair.student, chunk, trace_layers=pair.shared_layers)
            vals.append(attention_kl(t_out.traces, s_out.traces, pair.shared_layers).item())
            weights.append(len(chunk))
    return float(np.average(vals, weights=weights))


def write_heal_log(log: list[StepReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in log:
            w.writerow([r.step, r.tokens_seen, repr(r.loss_total), repr(r.loss_ce), repr(r.loss_attn),
                        repr(r.grad_norm), repr(r.lr)])
