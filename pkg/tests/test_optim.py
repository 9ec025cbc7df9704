import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridlab.optim import (AdamWHyper, AdamWState, OptimizerStateError, adamw_step, clip_global_norm,
                             warmup_cosine)
from hybridlab.tensor import Tensor


def scalar_adamw(theta, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.01):
    """Element-by-element AdamW written from the update rule, with plain floats."""
    theta = [float(t) for t in theta]
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mhat = m[i] / (1 - b1 ** t)
            vhat = v[i] / (1 - b2 ** t)
            theta[i] = theta[i] - lr * (mhat / (math.sqrt(vhat) + eps) + wd * theta[i])
    return theta


def test_adamw_matches_scalar_oracle_on_a_quadratic():
    a = np.array([0.5, 2.0, -1.5, 3.0])
    c = np.array([1.0, -2.0, 0.25, 4.0])
    grad = lambda th: [2 * ai * (ti - ci) for ai, ti, ci in zip(a, th, c)]
    start = np.array([0.3, -0.7, 1.1, 2.0])
    expected = scalar_adamw(start, grad, steps=10, lr=0.05)

    p = Tensor(start.copy())
    state = AdamWState.for_params([p])
    for _ in range(10):
        adamw_step([p], [2 * a * (p.data - c)], state, 0.05)
    assert np.allclose(p.data, expected, rtol=0, atol=1e-10)
    assert state.step == 10


def test_weight_decay_is_decoupled_from_the_gradient():
    p = Tensor(np.array([2.0, -4.0]))
    state = AdamWState.for_params([p])
    adamw_step([p], [None], state, 0.1, AdamWHyper(weight_decay=0.5))
    # zero gradient: only the decay term moves the weights
    assert np.allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0, -4.0 + 0.1 * 0.5 * 4.0])


def test_first_step_moves_each_weight_by_about_lr():
    p = Tensor(np.array([1.0, 1.0, 1.0]))
    state = AdamWState.for_params([p])
    adamw_step([p], [np.array([1e-3, 5.0, -20.0])], state, 0.01, AdamWHyper(weight_decay=0.0))
    assert np.allclose(p.data, [0.99, 0.99, 1.01], atol=1e-6)


def test_state_mismatch_raises():
    p = Tensor(np.zeros(3))
    state = AdamWState.for_params([p])
    with pytest.raises(OptimizerStateError):
        adamw_step([p, Tensor(np.zeros(2))], [None, None], state, 0.1)
    with pytest.raises(OptimizerStateError):
        adamw_step([Tensor(np.zeros(4))], [None], state, 0.1)


def test_schedule_endpoints():
    assert warmup_cosine(0, 1e-3, 10, 100) == 0.0
    assert warmup_cosine(5, 1e-3, 10, 100) == pytest.approx(5e-4)
    assert warmup_cosine(10, 1e-3, 10, 100) == pytest.approx(1e-3)
    assert warmup_cosine(55, 1e-3, 10, 100) == pytest.approx(5e-4)
    assert warmup_cosine(100, 1e-3, 10, 100) == 0.0
    assert warmup_cosine(250, 1e-3, 10, 100) == 0.0
    assert warmup_cosine(0, 1e-3, 0, 100) == pytest.approx(1e-3)


@settings(max_examples=50, deadline=None)
@given(warmup=st.integers(0, 50), extra=st.integers(1, 200))
def test_schedule_rises_then_falls(warmup, extra):
    total = warmup + extra
    lrs = [warmup_cosine(s, 1.0, warmup, total) for s in range(total + 1)]
    peak = int(np.argmax(lrs))
    assert all(0.0 <= x <= 1.0 + 1e-12 for x in lrs)
    assert all(lrs[i] <= lrs[i + 1] + 1e-12 for i in range(peak))
    assert all(lrs[i] >= lrs[i + 1] - 1e-12 for i in range(peak, total))


def test_clip_contract():
    g = [np.array([3.0, 0.0]), np.array([[4.0]]), None]
    clipped, before, after = clip_global_norm(g, 1.0)
    assert before == pytest.approx(5.0)
    assert after == pytest.approx(1.0)
    assert np.allclose(clipped[0], [0.6, 0.0]) and np.allclose(clipped[1], [[0.8]]) and clipped[2] is None
    same, before, after = clip_global_norm(g, 10.0)
    assert same is g and before == after == pytest.approx(5.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**16), max_norm=st.floats(1e-3, 1e3))
def test_clipped_norm_never_exceeds_the_limit(seed, max_norm):
    r = np.random.default_rng(seed)
    grads = [r.standard_normal((3, 4)) * 10, r.standard_normal(5)]
    clipped, before, after = clip_global_norm(grads, max_norm)
    assert after <= max_norm * (1 + 1e-9)
    assert after == pytest.approx(min(before, max_norm), rel=1e-9)
