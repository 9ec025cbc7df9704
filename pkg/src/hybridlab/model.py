"""Decoder-only transformer assembled from per-layer attention kinds."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .attention import (AttentionInputs, AttentionTrace, ConfigurationError, LayerKind, attend,
                        identity_attention, kv_cache_entries)
from .tensor import Tensor

NORM_EPS = 1e-6
CKPT_MAGIC = b"HYBRIDLAB-CKPT v1\n"
PROJECTIONS = ("wq", "wk", "wv", "wo")


class StateError(RuntimeError):
    pass


class TraceUnavailableError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layer_count: int = 8
    hidden_dim: int = 64
    head_count: int = 4
    ffn_dim: int = 256
    vocab_size: int = 256
    max_seq_len: int = 256
    rng_seed: int = 0

    def __post_init__(self):
        if self.layer_count < 1:
            raise ConfigurationError("layer_count must be >= 1")
        if self.head_count < 1 or self.hidden_dim % self.head_count:
            raise ConfigurationError("hidden_dim must be divisible by head_count")
        if self.ffn_dim < self.hidden_dim:
            raise ConfigurationError("ffn_dim must be >= hidden_dim")
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must be >= 2")
        if self.max_seq_len < 1:
            raise ConfigurationError("max_seq_len must be >= 1")


@dataclass(frozen=True)
class HybridPlan:
    """Per-layer attention kinds plus the cap on how many may be softmax."""

    kinds: tuple[LayerKind, ...]
    softmax_budget: int

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        if self.softmax_budget < 0:
            raise ConfigurationError("softmax_budget must be >= 0")
        used = self.softmax_count
        if used > self.softmax_budget:
            raise ConfigurationError(f"plan uses {used} softmax layers, budget is {self.softmax_budget}")

    @classmethod
    def all_softmax(cls, layer_count: int) -> HybridPlan:
        return cls((LayerKind.softmax(),) * layer_count, layer_count)

    @classmethod
    def uniform(cls, kind: LayerKind, layer_count: int) -> HybridPlan:
        return cls((kind,) * layer_count, layer_count if kind.is_softmax else 0)

    @classmethod
    def parse(cls, text: str, softmax_budget: int | None = None) -> HybridPlan:
        kinds = tuple(LayerKind.parse(t) for t in text.strip().split(","))
        budget = sum(k.is_softmax for k in kinds) if softmax_budget is None else softmax_budget
        return cls(kinds, budget)

    def to_text(self) -> str:
        return ",".join(k.token() for k in self.kinds)

    def __len__(self) -> int:
        return len(self.kinds)

    def __getitem__(self, i: int) -> LayerKind:
        return self.kinds[i]

    @property
    def softmax_count(self) -> int:
        return sum(k.is_softmax for k in self.kinds)

    @property
    def softmax_layers(self) -> tuple[int, ...]:
        return tuple(i for i, k in enumerate(self.kinds) if k.is_softmax)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for k in self.kinds:
            out[k.token()] = out.get(k.token(), 0) + 1
        return out

    def with_kind(self, layer: int, kind: LayerKind) -> HybridPlan:
        if not 0 <= layer < len(self.kinds):
            raise IndexError(f"layer {layer} out of range for a {len(self.kinds)}-layer plan")
        kinds = list(self.kinds)
        kinds[layer] = kind
        return HybridPlan(tuple(kinds), self.softmax_budget)


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 32
    alpha: float = 32.0
    dropout: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigurationError("LoRA rank must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("LoRA dropout must lie in [0, 1)")


@dataclass
class LoraAdapter:
    """Low-rank delta ``(alpha / rank) * A @ B`` added to one projection."""

    a: Tensor
    b: Tensor
    rank: int
    alpha: float
    dropout_rate: float

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.a.data @ self.b.data)


@dataclass
class ForwardOutput:
    logits: Tensor
    traces: dict[int, AttentionTrace] = field(default_factory=dict)
    kv_occupancy: list[int] = field(default_factory=list)


class Model:
    """Parameters plus a plan. Views made by :func:`swap_layer_kind` share parameter storage."""

    def __init__(self, cfg: ModelConfig, plan: HybridPlan, params: dict[str, Tensor],
                 adapters: dict[str, LoraAdapter] | None = None, lora_cfg: LoraConfig | None = None):
        self.cfg = cfg
        self.plan = plan
        self.params = params
        self.adapters = adapters if adapters is not None else {}
        self.lora_cfg = lora_cfg

    def __repr__(self) -> str:
        return f"Model(plan={self.plan.to_text()}, adapters={len(self.adapters)})"

    def layer_param(self, layer: int, name: str) -> Tensor:
        return self.params[f"layers.{layer}.{name}"]

    def effective_weight(self, layer: int, proj: str) -> np.ndarray:
        w = self.layer_param(layer, proj).data
        ad = self.adapters.get(f"layers.{layer}.{proj}")
        return w if ad is None else w + ad.delta()


def _param_specs(cfg: ModelConfig):
    d, f = cfg.hidden_dim, cfg.ffn_dim
    yield "embedding", (cfg.vocab_size, d), "normal", d
    for i in range(cfg.layer_count):
        yield f"layers.{i}.norm_attn", (d,), "ones", None
        for p in PROJECTIONS:
            yield f"layers.{i}.{p}", (d, d), "normal", d
        yield f"layers.{i}.norm_ffn", (d,), "ones", None
        yield f"layers.{i}.w1", (d, f), "normal", d
        yield f"layers.{i}.w2", (f, d), "normal", f
    yield "norm_final", (d,), "ones", None


def build_model(cfg: ModelConfig, plan: HybridPlan) -> Model:
    """Deterministic initialization from ``cfg.rng_seed``; normal weights with std ``1/sqrt(fan_in)``."""
    if len(plan) != cfg.layer_count:
        raise ConfigurationError(f"plan has {len(plan)} layers, config has {cfg.layer_count}")
    if plan.softmax_count > plan.softmax_budget:
        raise ConfigurationError("plan violates its softmax budget")
    rng = np.random.default_rng(cfg.rng_seed)
    dtype = T.get_dtype()
    params: dict[str, Tensor] = {}
    for name, shape, init, fan_in in _param_specs(cfg):
        if init == "ones":
            data = np.ones(shape)
        else:
            data = rng.standard_normal(shape) / np.sqrt(fan_in)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return Model(cfg, plan, params)


def swap_layer_kind(model: Model, layer: int, kind: LayerKind) -> Model:
    return Model(model.cfg, model.plan.with_kind(layer, kind), model.params, model.adapters, model.lora_cfg)


def with_plan(model: Model, plan: HybridPlan) -> Model:
    if len(plan) != model.cfg.layer_count:
        raise ConfigurationError(f"plan has {len(plan)} layers, model has {model.cfg.layer_count}")
    return Model(model.cfg, plan, model.params, model.adapters, model.lora_cfg)


def copy_model(model: Model, plan: HybridPlan | None = None) -> Model:
    params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.data.dtype)
              for k, v in model.params.items()}
    adapters = {k: LoraAdapter(Tensor(a.a.data.copy(), requires_grad=True, dtype=a.a.data.dtype),
                               Tensor(a.b.data.copy(), requires_grad=True, dtype=a.b.data.dtype),
                               a.rank, a.alpha, a.dropout_rate)
                for k, a in model.adapters.items()}
    return Model(model.cfg, plan or model.plan, params, adapters, model.lora_cfg)


def attach_lora(model: Model, lora_cfg: LoraConfig) -> None:
    """Add four adapters to every non-identity layer and freeze every base tensor."""
    if model.adapters:
        raise StateError("adapters are already attached")
    d, r = model.cfg.hidden_dim, lora_cfg.rank
    rng = np.random.default_rng(lora_cfg.seed)
    dtype = T.get_dtype()
    for p in model.params.values():
        p.requires_grad = False
        p.grad = None
    for i, kind in enumerate(model.plan.kinds):
        if kind.is_identity:
            continue
        for proj in PROJECTIONS:
            a = Tensor((rng.standard_normal((d, r)) / np.sqrt(d)).astype(dtype), requires_grad=True)
            b = Tensor(np.zeros((r, d), dtype=dtype), requires_grad=True)
            model.adapters[f"layers.{i}.{proj}"] = LoraAdapter(a, b, r, float(lora_cfg.alpha),
                                                               float(lora_cfg.dropout))
    model.lora_cfg = lora_cfg


def trainable_parameters(model: Model) -> list[Tensor]:
    """Adapter tensors of non-identity layers, in declaration order."""
    if not model.adapters:
        raise StateError("trainable_parameters() needs attach_lora() first")
    out = []
    for name, ad in model.adapters.items():
        layer = int(name.split(".")[1])
        if not model.plan[layer].is_identity:
            out.extend((ad.a, ad.b))
    return out


def base_parameters(model: Model) -> dict[str, Tensor]:
    return model.params


def parameter_hash(tensors: dict[str, Tensor] | Iterable[tuple[str, Tensor]]) -> str:
    items = tensors.items() if isinstance(tensors, dict) else tensors
    h = hashlib.sha256()
    for name, t in items:
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def sinusoidal_positions(positions: np.ndarray, d: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    i = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d)
    pe = np.empty(pos.shape[:-1] + (d,))
    pe[..., 0::2] = np.sin(angle)
    pe[..., 1::2] = np.cos(angle)
    return pe


def rms_norm(x: Tensor, gain: Tensor) -> Tensor:
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x * T.rsqrt(ms + NORM_EPS) * gain


def _project(model: Model, layer: int, proj: str, x: Tensor, dropout_rng) -> Tensor:
    y = x @ model.layer_param(layer, proj)
    ad = model.adapters.get(f"layers.{layer}.{proj}")
    if ad is None:
        return y
    xa = x
    if dropout_rng is not None and ad.dropout_rate > 0:
        keep = dropout_rng.random(x.shape) >= ad.dropout_rate
        xa = x * (keep / (1.0 - ad.dropout_rate)).astype(x.data.dtype)
    return y + ((xa @ ad.a) @ ad.b) * ad.scale


def forward(model: Model, tokens, trace_layers: Iterable[int] = (), dropout_rng=None) -> ForwardOutput:
    """Run tokens ``[n]`` or ``[batch, n]`` through the model.

    ``dropout_rng`` enables adapter dropout (training only).
    """
    cfg, plan = model.cfg, model.plan
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[-1]
    if n < 1 or n > cfg.max_seq_len:
        raise ConfigurationError(f"sequence length {n} outside [1, {cfg.max_seq_len}]")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise IndexError(f"token ids must lie in [0, {cfg.vocab_size})")
    trace_layers = sorted(set(trace_layers))
    for l in trace_layers:
        if not 0 <= l < cfg.layer_count or not plan[l].is_softmax:
            raise TraceUnavailableError(f"layer {l} is not a softmax layer; no trace available")
    d = cfg.hidden_dim
    emb = model.params["embedding"]
    pe = sinusoidal_positions(np.arange(n), d).astype(emb.data.dtype)
    x = T.take_rows(emb, tokens) * np.sqrt(d) + pe
    traces: dict[int, AttentionTrace] = {}
    for i, kind in enumerate(plan.kinds):
        if kind.is_identity:
            x = identity_attention(x)
        else:
            h = rms_norm(x, model.layer_param(i, "norm_attn"))
            inputs = AttentionInputs(_project(model, i, "wq", h, dropout_rng),
                                     _project(model, i, "wk", h, dropout_rng),
                                     _project(model, i, "wv", h, dropout_rng), cfg.head_count)
            attn, trace = attend(kind, inputs, capture_trace=i in trace_layers)
            if trace is not None:
                traces[i] = trace
            x = x + _project(model, i, "wo", attn, dropout_rng)
        h = rms_norm(x, model.layer_param(i, "norm_ffn"))
        x = x + T.gelu(h @ model.layer_param(i, "w1")) @ model.layer_param(i, "w2")
    h = rms_norm(x, model.params["norm_final"])
    logits = h @ emb.transpose(1, 0)
    return ForwardOutput(logits, traces, [kv_cache_entries(k, n) for k in plan.kinds])


# checkpoints ------------------------------------------------------------------

def _named_tensors(model: Model) -> list[tuple[str, Tensor]]:
    out = list(model.params.items())
    for name, ad in model.adapters.items():
        out.append((f"{name}.lora_a", ad.a))
        out.append((f"{name}.lora_b", ad.b))
    return out


def save_checkpoint(model: Model, path) -> None:
    """Header line of JSON (config, plan, tensor table) followed by little-endian tensor blocks."""
    tensors = _named_tensors(model)
    header = {
        "config": asdict(model.cfg),
        "plan": model.plan.to_text(),
        "softmax_budget": model.plan.softmax_budget,
        "lora": asdict(model.lora_cfg) if model.lora_cfg is not None else None,
        "tensors": [[name, list(t.shape), t.data.dtype.str.lstrip("<>=|")] for name, t in tensors],
    }
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise ConfigurationError(f"{path}: not a checkpoint file")
    end = raw.index(b"\n", len(CKPT_MAGIC))
    header = json.loads(raw[len(CKPT_MAGIC):end])
    offset = end + 1
    cfg = ModelConfig(**header["config"])
    plan = HybridPlan.parse(header["plan"], header["softmax_budget"])
    lora_cfg = LoraConfig(**header["lora"]) if header["lora"] else None
    frozen = lora_cfg is not None
    params: dict[str, Tensor] = {}
    pending: dict[str, dict[str, Tensor]] = {}
    for name, shape, dt in header["tensors"]:
        dtype = np.dtype("<" + dt)
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape)
        offset += count * dtype.itemsize
        arr = arr.astype(dtype.newbyteorder("="))
        if name.endswith(".lora_a") or name.endswith(".lora_b"):
            pending.setdefault(name[:-7], {})[name[-1]] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
        else:
            params[name] = Tensor(arr, requires_grad=not frozen, dtype=arr.dtype)
    if offset != len(raw):
        raise ConfigurationError(f"{path}: {len(raw) - offset} trailing bytes")
    adapters = {k: LoraAdapter(v["a"], v["b"], lora_cfg.rank, float(lora_cfg.alpha), float(lora_cfg.dropout))
                for k, v in pending.items()}
    return Model(cfg, plan, params, adapters, lora_cfg)
