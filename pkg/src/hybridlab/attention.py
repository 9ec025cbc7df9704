"""Softmax, sliding-window and identity attention behind one interface."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

DEFAULT_WINDOW = 64


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class LayerKind:
    """Attention variant of one layer: ``softmax``, ``window`` (with ``window`` size) or ``identity``."""

    variant: str
    window: int | None = None

    def __post_init__(self):
        if self.variant not in ("softmax", "window", "identity"):
            raise ConfigurationError(f"unknown layer variant {self.variant!r}")
        if self.variant == "window":
            if self.window is None or int(self.window) < 1:
                raise ConfigurationError(f"sliding window must be >= 1, got {self.window}")
        elif self.window is not None:
            raise ConfigurationError(f"{self.variant} layers take no window")

    @classmethod
    def softmax(cls) -> LayerKind:
        return cls("softmax")

    @classmethod
    def sliding(cls, window: int = DEFAULT_WINDOW) -> LayerKind:
        return cls("window", int(window))

    @classmethod
    def identity(cls) -> LayerKind:
        return cls("identity")

    @property
    def is_softmax(self) -> bool:
        return self.variant == "softmax"

    @property
    def is_window(self) -> bool:
        return self.variant == "window"

    @property
    def is_identity(self) -> bool:
        return self.variant == "identity"

    def token(self) -> str:
        if self.is_softmax:
            return "S"
        if self.is_identity:
            return "I"
        return f"W{self.window}"

    @classmethod
    def parse(cls, token: str) -> LayerKind:
        token = token.strip()
        if token == "S":
            return cls.softmax()
        if token == "I":
            return cls.identity()
        m = re.fullmatch(r"W(\d+)", token)
        if m:
            return cls.sliding(int(m.group(1)))
        raise ConfigurationError(f"bad layer kind token {token!r}; expected S, I or W<w>")

    def __str__(self) -> str:
        return self.token()


@dataclass
class AttentionInputs:
    """Projected queries, keys and values, each ``[..., n, d]``."""

    q: Tensor
    k: Tensor
    v: Tensor
    head_count: int

    def __post_init__(self):
        shape = self.q.shape
        if self.k.shape != shape or self.v.shape != shape:
            raise DimensionError(f"q/k/v shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}")
        if len(shape) < 2:
            raise DimensionError(f"q/k/v must be at least 2-D, got {shape}")
        n, d = shape[-2:]
        h = self.head_count
        if n < 1 or h < 1 or d < h or d % h:
            raise DimensionError(f"need n >= 1 and d divisible by head_count; got n={n}, d={d}, h={h}")

    @property
    def seq_len(self) -> int:
        return self.q.shape[-2]

    @property
    def dim(self) -> int:
        return self.q.shape[-1]


@dataclass
class AttentionTrace:
    """Per-head attention weights ``[..., h, n, n]``; zero outside the causal/window support."""

    weights: Tensor


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, n, d = x.shape
    nd = len(lead)
    x = x.reshape(*lead, n, h, d // h)
    return x.transpose(*range(nd), nd + 1, nd, nd + 2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    nd = len(lead)
    x = x.transpose(*range(nd), nd + 1, nd, nd + 2)
    return x.reshape(*lead, n, h * dh)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def band_mask(n: int, window: int) -> np.ndarray:
    """``mask[i, j]`` is true iff ``max(0, i - window + 1) <= j <= i``."""
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    return (j <= i) & (j > i - window)


def masked_attention(inputs: AttentionInputs, mask: np.ndarray, capture_trace: bool = False):
    """Dense multi-head attention under an explicit ``[n, n]`` mask."""
    h = inputs.head_count
    dh = inputs.dim // h
    q = _split_heads(inputs.q, h)
    k = _split_heads(inputs.k, h)
    v = _split_heads(inputs.v, h)
    nd = q.ndim
    kt = k.transpose(*range(nd - 2), nd - 1, nd - 2)
    scores = (q @ kt) * (1.0 / np.sqrt(dh))
    probs = T.softmax_rows(scores, mask)
    out = _merge_heads(probs @ v)
    return out, (AttentionTrace(probs) if capture_trace else None)


def softmax_attention(inputs: AttentionInputs, capture_trace: bool = False):
    """Causal scaled dot-product attention with scale ``1/sqrt(d/h)``."""
    return masked_attention(inputs, causal_mask(inputs.seq_len), capture_trace)


def sliding_window_attention(inputs: AttentionInputs, window: int, capture_trace: bool = False):
    """Each position attends to itself and up to ``window - 1`` preceding positions.

    Scores are computed per row over a ``[n, w]`` band, never an ``[n, n]`` buffer.
    """
    if window < 1:
        raise ConfigurationError(f"sliding window must be >= 1, got {window}")
    n = inputs.seq_len
    w = min(window, n)
    h = inputs.head_count
    dh = inputs.dim // h
    q = _split_heads(inputs.q, h)
    kw = T.band_windows(_split_heads(inputs.k, h), w)
    vw = T.band_windows(_split_heads(inputs.v, h), w)
    scores = T.einsum("...id,...ijd->...ij", q, kw) * (1.0 / np.sqrt(dh))
    valid = (np.arange(n)[:, None] - w + 1 + np.arange(w)[None, :]) >= 0
    probs = T.softmax_rows(scores, valid)
    out = _merge_heads(T.einsum("...ij,...ijd->...id", probs, vw))
    trace = None
    if capture_trace:
        trace = AttentionTrace(Tensor(_band_to_dense(probs.data, n, w), dtype=probs.data.dtype))
    return out, trace


def _band_to_dense(band: np.ndarray, n: int, w: int) -> np.ndarray:
    dense = np.zeros(band.shape[:-1] + (n,), dtype=band.dtype)
    rows = np.arange(n)
    for j in range(w):
        cols = rows - w + 1 + j
        ok = cols >= 0
        dense[..., rows[ok], cols[ok]] = band[..., rows[ok], j]
    return dense


def identity_attention(x: Tensor) -> Tensor:
    """The attention sublayer is skipped: the residual stream passes through unchanged."""
    return x


def attend(kind: LayerKind, inputs: AttentionInputs, capture_trace: bool = False):
    if kind.is_softmax:
        return softmax_attention(inputs, capture_trace)
    if kind.is_window:
        return sliding_window_attention(inputs, kind.window, capture_trace)
    raise ConfigurationError("identity layers do not evaluate attention")


def kv_cache_entries(kind: LayerKind, seq_len: int) -> int:
    """Cached key/value positions one layer holds after ``seq_len`` tokens."""
    if seq_len < 0:
        raise ValueError(f"seq_len must be >= 0, got {seq_len}")
    if kind.is_softmax:
        return seq_len
    if kind.is_window:
        return min(seq_len, kind.window)
    return 0
