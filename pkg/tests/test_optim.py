"""Adam against a closed-form re-derivation, plus its state bookkeeping."""

import numpy as np
import pytest

from spineseg.optim import BETA1, BETA2, EPS, AdamState, adam_step
from spineseg.tensor import Tensor


def _named(rng, shapes):
    out = []
    for i, shape in enumerate(shapes):
        p = Tensor(rng.standard_normal(shape), requires_grad=True)
        p.grad = rng.standard_normal(shape)
        out.append((f"p{i}", p))
    return out


def oracle_adam(params, grads_per_step, lr):
    """Textbook Adam, recomputed from scratch with fresh arrays."""
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    x = [p.copy() for p in params]
    for t, grads in enumerate(grads_per_step, 1):
        for i, g in enumerate(grads):
            m[i] = BETA1 * m[i] + (1 - BETA1) * g
            v[i] = BETA2 * v[i] + (1 - BETA2) * g * g
            mhat = m[i] / (1 - BETA1 ** t)
            vhat = v[i] / (1 - BETA2 ** t)
            x[i] = x[i] - lr * mhat / (np.sqrt(vhat) + EPS)
    return x


def test_single_step_matches_closed_form(rng):
    named = _named(rng, [(3, 4), (5,)])
    start = [p.data.copy() for _, p in named]
    grads = [[p.grad.copy() for _, p in named]]
    st = AdamState.for_params(named)
    adam_step(named, st, lr=1e-2)
    want = oracle_adam(start, grads, 1e-2)
    for (_, p), w in zip(named, want):
        np.testing.assert_allclose(p.data, w, rtol=1e-12, atol=0)


def test_multi_step_trajectory_matches_closed_form(rng):
    named = _named(rng, [(2, 3)])
    start = [named[0][1].data.copy()]
    st = AdamState.for_params(named)
    grads_per_step = []
    for _ in range(7):
        g = rng.standard_normal((2, 3))
        named[0][1].grad = g
        grads_per_step.append([g.copy()])
        adam_step(named, st, lr=3e-3)
    want = oracle_adam(start, grads_per_step, 3e-3)
    np.testing.assert_allclose(named[0][1].data, want[0], rtol=1e-10, atol=1e-14)
    assert st.t == 7


def test_first_step_size_is_lr_for_unit_gradient():
    p = Tensor(np.zeros(4))
    p.grad = np.ones(4)
    named = [("p", p)]
    st = AdamState.for_params(named)
    adam_step(named, st, lr=0.05)
    # bias correction makes the very first step ~lr regardless of scale
    np.testing.assert_allclose(p.data, -0.05, rtol=1e-6)


def test_descends_a_quadratic():
    p = Tensor(np.array([5.0, -3.0]))
    named = [("p", p)]
    st = AdamState.for_params(named)
    for _ in range(500):
        p.grad = 2.0 * p.data  # d/dx of x^2
        adam_step(named, st, lr=0.05)
    # near the optimum Adam dithers at the lr scale; well inside that is enough
    assert np.abs(p.data).max() < 0.1


def test_missing_gradient_is_an_error(rng):
    named = _named(rng, [(2,)])
    named[0][1].grad = None
    with pytest.raises(ValueError, match="no gradient"):
        adam_step(named, AdamState.for_params(named), lr=1e-3)


def test_shape_mismatch_is_an_error(rng):
    named = _named(rng, [(2,)])
    named[0][1].grad = np.zeros(3)
    with pytest.raises(ValueError, match="shape"):
        adam_step(named, AdamState.for_params(named), lr=1e-3)


def test_gradients_left_untouched_for_caller(rng):
    named = _named(rng, [(3,)])
    g = named[0][1].grad.copy()
    adam_step(named, AdamState.for_params(named), lr=1e-3)
    np.testing.assert_array_equal(named[0][1].grad, g)
