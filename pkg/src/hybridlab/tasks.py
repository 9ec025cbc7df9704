"""Synthetic sequence tasks, the training corpus built from them, and two-choice evaluation.

Every task emits fixed-length sequences whose final token is the answer. Scoring is
two-choice: an example counts as correct when the model's logit for the answer
beats the logit for a task-specific distractor at the final position, so an
untrained model sits near 50%.

Token layout (vocabulary must hold at least ``MIN_VOCAB`` ids)::

    0 PAD, 1 BOS, 2 SEP
    16..79    copy symbols
    80..143   recall pairs; id 80 + 8*key + value binds one key to one value
    144..151  recall query keys
    152..159  recall answer values
    208..223  n-gram symbols
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import ConfigurationError
from .model import Model, forward

PAD, BOS, SEP = 0, 1, 2
COPY = np.arange(16, 80)
RECALL_KEYS = 8
PAIRS = np.arange(80, 80 + RECALL_KEYS * RECALL_KEYS)
KEYS = np.arange(144, 144 + RECALL_KEYS)
VALUES = np.arange(152, 152 + RECALL_KEYS)
NGRAM = np.arange(208, 224)
MIN_VOCAB = 224
TASKS = ("copy", "recall", "ngram")
NGRAM_NOISE = 0.3


@dataclass
class TaskBatch:
    sequences: np.ndarray  # [count, seq_len]; the last column is the answer
    distractors: np.ndarray  # [count]


def ngram_table(grammar_seed: int) -> np.ndarray:
    """Next-symbol table indexed by the two previous n-gram symbols (positions within NGRAM)."""
    rng = np.random.default_rng([grammar_seed, 3])
    return rng.integers(0, len(NGRAM), size=(len(NGRAM), len(NGRAM)))


def _pick_other(rng, pool: np.ndarray, answers: np.ndarray) -> np.ndarray:
    out = rng.choice(pool, size=answers.shape)
    clash = out == answers
    while clash.any():
        out[clash] = rng.choice(pool, size=int(clash.sum()))
        clash = out == answers
    return out


def make_copy(rng, count: int, seq_len: int) -> TaskBatch:
    """``BOS.. x_1..x_k SEP x_1..x_k`` with ``k = (seq_len - 2) // 2``: the second half repeats the first."""
    k = (seq_len - 2) // 2
    prefix = rng.choice(COPY, size=(count, k))
    lead = np.full((count, seq_len - 2 * k - 1), BOS)
    seqs = np.concatenate([lead, prefix, np.full((count, 1), SEP), prefix], axis=1)
    return TaskBatch(seqs, _pick_other(rng, COPY, seqs[:, -1]))


def make_recall(rng, count: int, seq_len: int) -> TaskBatch:
    """A shuffled block of pair tokens (one per key), ``SEP``, then distinct query keys each followed by its value.

    Each query key occurs once, so its value is only recoverable from the pair block.
    The distractor is a value bound to a different key in the same block.
    """
    queries = min(RECALL_KEYS, (seq_len - 2 - RECALL_KEYS) // 2)
    if queries < 1:
        raise ConfigurationError(f"recall needs seq_len >= {RECALL_KEYS + 4}")
    pad = seq_len - (RECALL_KEYS + 1 + 2 * queries)
    seqs = np.empty((count, seq_len), dtype=np.int64)
    distractors = np.empty(count, dtype=np.int64)
    for r in range(count):
        vals = rng.integers(0, RECALL_KEYS, size=RECALL_KEYS)
        order = rng.permutation(RECALL_KEYS)
        block = PAIRS[0] + RECALL_KEYS * order + vals[order]
        q = rng.permutation(RECALL_KEYS)[:queries]
        tail = np.empty(2 * queries, dtype=np.int64)
        tail[0::2], tail[1::2] = KEYS[q], VALUES[vals[q]]
        seqs[r] = np.concatenate([[BOS] * pad, block, [SEP], tail])
        others = np.setdiff1d(vals, [vals[q[-1]]])
        if others.size:
            distractors[r] = VALUES[rng.choice(others)]
        else:
            distractors[r] = _pick_other(rng, VALUES, seqs[r, -1:])[0]
    return TaskBatch(seqs, distractors)


def make_ngram(rng, count: int, seq_len: int, table: np.ndarray) -> TaskBatch:
    """A noisy trigram source; the final transition is always the table's."""
    body = seq_len - 1
    sym = np.empty((count, body), dtype=np.int64)
    sym[:, :2] = rng.integers(0, len(NGRAM), size=(count, 2))
    for t in range(2, body):
        nxt = table[sym[:, t - 2], sym[:, t - 1]]
        noisy = rng.random(count) < NGRAM_NOISE
        if t == body - 1:
            noisy[:] = False
        sym[:, t] = np.where(noisy, rng.integers(0, len(NGRAM), size=count), nxt)
    seqs = np.concatenate([np.full((count, 1), BOS), NGRAM[sym]], axis=1)
    return TaskBatch(seqs, _pick_other(rng, NGRAM, seqs[:, -1]))


def make_task(name: str, rng, count: int, seq_len: int, grammar_seed: int) -> TaskBatch:
    if name == "copy":
        return make_copy(rng, count, seq_len)
    if name == "recall":
        return make_recall(rng, count, seq_len)
    if name == "ngram":
        return make_ngram(rng, count, seq_len, ngram_table(grammar_seed))
    raise ConfigurationError(f"unknown task {name!r}; expected one of {TASKS}")


def corpus(count: int, seq_len: int, seed: int, grammar_seed: int, tasks=TASKS) -> np.ndarray:
    """Shuffled mixture of task sequences ``[count, seq_len]`` for language-model training."""
    rng = np.random.default_rng([seed, 11])
    per = -(-count // len(tasks))
    seqs = np.concatenate([make_task(t, rng, per, seq_len, grammar_seed).sequences for t in tasks])
    return seqs[rng.permutation(len(seqs))[:count]]


@dataclass(frozen=True)
class EvalHarness:
    tasks: tuple[str, ...] = TASKS
    examples_per_task: int = 200
    rng_seed: int = 0
    seq_len: int = 64
    grammar_seed: int = 1234
    batch_size: int = 100

    def __post_init__(self):
        for t in self.tasks:
            if t not in TASKS:
                raise ConfigurationError(f"unknown task {t!r}; expected one of {TASKS}")
        if self.examples_per_task < 1 or self.seq_len < 8:
            raise ConfigurationError("harness needs examples_per_task >= 1 and seq_len >= 8")

    def examples(self, task: str) -> TaskBatch:
        rng = np.random.default_rng([self.rng_seed, TASKS.index(task), 7])
        return make_task(task, rng, self.examples_per_task, self.seq_len, self.grammar_seed)


def _check_compatible(model: Model, harness: EvalHarness) -> None:
    if model.cfg.vocab_size < MIN_VOCAB:
        raise ConfigurationError(f"tasks need vocab_size >= {MIN_VOCAB}, model has {model.cfg.vocab_size}")
    if harness.seq_len - 1 > model.cfg.max_seq_len:
        raise ConfigurationError(f"harness contexts of {harness.seq_len - 1} tokens exceed "
                                 f"max_seq_len {model.cfg.max_seq_len}")


def task_accuracies(model: Model, harness: EvalHarness) -> dict[str, float]:
    """Percent of examples per task where the answer outscores its distractor."""
    _check_compatible(model, harness)
    out = {}
    with T.no_grad():
        for task in harness.tasks:
            batch = harness.examples(task)
            ctx = batch.sequences[:, :-1]
            answers = batch.sequences[:, -1]
            hits = 0
            for s in range(0, len(ctx), harness.batch_size):
                logits = forward(model, ctx[s:s + harness.batch_size]).logits.data[:, -1, :]
                rows = np.arange(len(logits))
                a = answers[s:s + harness.batch_size]
                dis = batch.distractors[s:s + harness.batch_size]
                hits += int((logits[rows, a] > logits[rows, dis]).sum())
            out[task] = 100.0 * hits / len(ctx)
    return out


def evaluate(model: Model, harness: EvalHarness) -> float:
    """Mean two-choice accuracy across the harness tasks, in [0, 100]."""
    accs = task_accuracies(model, harness)
    return float(np.mean([accs[t] for t in harness.tasks]))
