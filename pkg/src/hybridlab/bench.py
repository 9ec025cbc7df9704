"""Inference-only incremental decoding, the KV memory model and the decode scaling bench.

FLOP estimates count multiply-adds (2 FLOPs each) of the attention score/value
products, the four attention projections and the FFN; normalization and softmax
exponentials are excluded.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attention import ConfigurationError, LayerKind, kv_cache_entries
from .model import NORM_EPS, PROJECTIONS, HybridPlan, Model, sinusoidal_positions, with_plan

BENCH_FIELDS = ("plan", "seq_len", "ms_per_token", "modeled_kv_entries", "measured_kv_entries", "flops_per_token")


class CapacityError(RuntimeError):
    pass


class _FullCache:
    """Every past key/value row, preallocated to the session capacity."""

    def __init__(self, h, dh, capacity, dtype):
        self.k = np.zeros((h, capacity, dh), dtype=dtype)
        self.v = np.zeros((h, capacity, dh), dtype=dtype)
        self.positions = np.zeros(capacity, dtype=np.int64)
        self.count = 0

    def append(self, k, v, pos):
        self.k[:, self.count] = k
        self.v[:, self.count] = v
        self.positions[self.count] = pos
        self.count += 1

    def view(self):
        return self.k[:, :self.count], self.v[:, :self.count]


class _RingCache:
    """The most recent ``window`` rows; the oldest row is overwritten when full."""

    def __init__(self, h, dh, window, dtype):
        self.window = window
        self.k = np.zeros((h, window, dh), dtype=dtype)
        self.v = np.zeros((h, window, dh), dtype=dtype)
        self.positions = np.full(window, -1, dtype=np.int64)
        self.write = 0
        self.count = 0

    def append(self, k, v, pos):
        self.k[:, self.write] = k
        self.v[:, self.write] = v
        self.positions[self.write] = pos
        self.write = (self.write + 1) % self.window
        self.count = min(self.count + 1, self.window)

    def view(self):
        if self.count < self.window:
            return self.k[:, :self.count], self.v[:, :self.count]
        return self.k, self.v


class DecodeSession:
    """Token-by-token decoder holding one KV cache per layer according to its kind."""

    def __init__(self, model: Model, capacity: int | None = None, dtype=np.float32):
        cfg = model.cfg
        self.model = model
        self.capacity = capacity or cfg.max_seq_len
        self.dtype = np.dtype(dtype)
        self.d = cfg.hidden_dim
        self.h = cfg.head_count
        self.dh = self.d // self.h
        cast = lambda a: np.ascontiguousarray(a, dtype=self.dtype)
        self.embedding = cast(model.params["embedding"].data)
        self.norm_final = cast(model.params["norm_final"].data)
        self.layers = []
        self.caches = []
        for i, kind in enumerate(model.plan.kinds):
            w = {name: cast(model.layer_param(i, name).data) for name in ("norm_attn", "norm_ffn", "w1", "w2")}
            if not kind.is_identity:
                for p in PROJECTIONS:
                    w[p] = cast(model.effective_weight(i, p))
                w["wqkv"] = np.concatenate([w["wq"], w["wk"], w["wv"]], axis=1)
            self.layers.append((kind, w))
            if kind.is_softmax:
                self.caches.append(_FullCache(self.h, self.dh, self.capacity, self.dtype))
            elif kind.is_window:
                self.caches.append(_RingCache(self.h, self.dh, kind.window, self.dtype))
            else:
                self.caches.append(None)
        self.position = 0
        self.peak_entries = 0
        self.scale = self.dtype.type(1.0 / np.sqrt(self.dh))

    def cache_entries(self) -> list[int]:
        return [0 if c is None else c.count for c in self.caches]

    def _norm(self, x, gain):
        return x * (1.0 / np.sqrt(np.mean(x * x) + NORM_EPS)) * gain

    def step(self, token: int) -> np.ndarray:
        """Consume one token and return the logits ``[vocab]`` predicting the next one."""
        if self.position >= self.capacity:
            raise CapacityError(f"session capacity {self.capacity} reached")
        d, h, dh = self.d, self.h, self.dh
        pe = sinusoidal_positions(np.array([self.position]), d)[0].astype(self.dtype)
        x = self.embedding[token] * self.dtype.type(np.sqrt(d)) + pe
        for (kind, w), cache in zip(self.layers, self.caches):
            if not kind.is_identity:
                hdn = self._norm(x, w["norm_attn"])
                qkv = hdn @ w["wqkv"]
                q = qkv[:d].reshape(h, dh)
                cache.append(qkv[d:2 * d].reshape(h, dh), qkv[2 * d:].reshape(h, dh), self.position)
                k, v = cache.view()
                scores = np.matmul(k, q[:, :, None])[:, :, 0] * self.scale
                scores -= scores.max(axis=1, keepdims=True)
                p = np.exp(scores)
                p /= p.sum(axis=1, keepdims=True)
                attn = np.matmul(p[:, None, :], v)[:, 0, :].reshape(d)
                x = x + attn @ w["wo"]
            hdn = self._norm(x, w["norm_ffn"])
            u = hdn @ w["w1"]
            u = 0.5 * u * (1.0 + np.tanh(self.dtype.type(0.7978845608028654) * u * (1.0 + self.dtype.type(0.044715) * u * u)))
            x = x + u @ w["w2"]
        self.position += 1
        self.peak_entries = max(self.peak_entries, sum(self.cache_entries()))
        hdn = self._norm(x, self.norm_final)
        return hdn @ self.embedding.T


def incremental_decode(session: DecodeSession, next_token: int) -> np.ndarray:
    return session.step(next_token)


def memory_model(plan: HybridPlan, seq_len: int, d: int, bytes_per_elem: int) -> int:
    """Total bytes of cached keys and values across layers."""
    return sum(2 * kv_cache_entries(k, seq_len) * d * bytes_per_elem for k in plan.kinds)


def modeled_entries(plan: HybridPlan, seq_len: int) -> int:
    return sum(kv_cache_entries(k, seq_len) for k in plan.kinds)


def flops_per_token(plan: HybridPlan, seq_len: int, d: int, ffn_dim: int) -> int:
    ffn = 4 * d * ffn_dim
    total = 0
    for k in plan.kinds:
        total += ffn
        if not k.is_identity:
            total += 8 * d * d + 4 * kv_cache_entries(k, seq_len) * d
    return total


@dataclass
class BenchRow:
    plan: str
    seq_len: int
    ms_per_token: float
    modeled_kv_entries: int
    measured_kv_entries: int
    flops_per_token: int


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    noisy: bool = False

    def row(self, plan: str, seq_len: int) -> BenchRow:
        for r in self.rows:
            if r.plan == plan and r.seq_len == seq_len:
                return r
        raise KeyError((plan, seq_len))

    def ratio(self, plan: str, n_hi: int, n_lo: int) -> float:
        return self.row(plan, n_hi).ms_per_token / self.row(plan, n_lo).ms_per_token


def _bench_plan(model: Model, plan_id: str, plan: HybridPlan, lengths, repeats, tokens_per_point, seed):
    m = with_plan(model, plan)
    capacity = lengths[-1] + tokens_per_point
    stream = np.random.default_rng(seed).integers(0, m.cfg.vocab_size, size=capacity)
    timings = {n: [] for n in lengths}
    measured = {}
    for rep in range(repeats + 1):
        session = DecodeSession(m, capacity=capacity)
        pos = 0
        for n in lengths:
            while pos < n:
                session.step(int(stream[pos]))
                pos += 1
            measured[n] = session.peak_entries
            for _ in range(tokens_per_point):
                t0 = time.perf_counter()
                session.step(int(stream[pos]))
                elapsed = time.perf_counter() - t0
                pos += 1
                if rep > 0:
                    timings[n].append(elapsed)
    cfg = m.cfg
    return [BenchRow(plan_id, n, 1e3 * float(np.median(timings[n])), modeled_entries(plan, n), measured[n],
                     flops_per_token(plan, n, cfg.hidden_dim, cfg.ffn_dim)) for n in lengths]


def run_scaling_bench(model: Model, plans, lengths, repeats: int = 5, tokens_per_point: int = 8,
                      seed: int = 0, parallel: bool = False) -> BenchReport:
    """Median per-token decode time at each context length, after one warmup pass.

    Every timed token is one sample; the median runs over all samples of all repeats,
    which keeps short bursts of machine noise out of the estimate.

    ``plans`` is a sequence of ``(plan_id, HybridPlan)``; every plan runs on ``model``'s weights.
    """
    lengths = [int(n) for n in lengths]
    if repeats < 3:
        raise ConfigurationError("repeats must be >= 3")
    if any(b < a + tokens_per_point for a, b in zip(lengths, lengths[1:])):
        raise ConfigurationError("lengths must ascend by at least tokens_per_point")
    jobs = [(model, pid, plan, lengths, repeats, tokens_per_point, seed) for pid, plan in plans]
    if parallel:
        with ThreadPoolExecutor() as pool:
            parts = list(pool.map(lambda job: _bench_plan(*job), jobs))
    else:
        parts = [_bench_plan(*job) for job in jobs]
    return BenchReport([r for part in parts for r in part], noisy=parallel)


def baseline_plans(layer_count: int, window: int = 64) -> list[tuple[str, HybridPlan]]:
    return [("all_softmax", HybridPlan.all_softmax(layer_count)),
            (f"all_swa{window}", HybridPlan.uniform(LayerKind.sliding(window), layer_count)),
            ("all_identity", HybridPlan.uniform(LayerKind.identity(), layer_count))]


def write_bench_csv(report: BenchReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_FIELDS)
        for r in report.rows:
            w.writerow([r.plan, r.seq_len, f"{r.ms_per_token:.6f}", r.modeled_kv_entries, r.measured_kv_entries,
                        r.flops_per_token])
