"""Schedule and optimizer tests.

The AdamW oracle is an independent float64 re-implementation of the
published update rule, written directly from the algorithm statement.
"""

import math

import numpy as np
import pytest

from lumendet.optim import LrSchedule, OptimState, adamw_step, lr_at
from lumendet.tensor import Tensor


class TestLrSchedule:
    def test_boundary_values(self):
        s = LrSchedule(lr0=1e-3, final_fraction=0.01,
                       warmup_epochs=3.0, total_epochs=50.0)
        assert math.isclose(lr_at(s, 1.5), 0.0005)
        assert math.isclose(lr_at(s, 3.0), 0.001)
        assert math.isclose(lr_at(s, 50.0), 1e-5)

    def test_warmup_is_linear(self):
        s = LrSchedule()
        for e in (0.3, 1.0, 2.7):
            assert math.isclose(lr_at(s, e), s.lr0 * e / s.warmup_epochs)

    def test_positive_and_nonincreasing_after_warmup(self):
        s = LrSchedule(lr0=2e-3, final_fraction=0.05,
                       warmup_epochs=2.0, total_epochs=20.0)
        grid = np.linspace(2.0, 20.0, 200)
        vals = [lr_at(s, float(e)) for e in grid]
        assert all(v > 0 for v in vals)
        assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
        # positive on the open warmup interval too
        assert all(lr_at(s, float(e)) > 0 for e in np.linspace(0.01, 2.0, 50))

    def test_continuity_at_warmup_boundary(self):
        s = LrSchedule()
        assert math.isclose(lr_at(s, s.warmup_epochs - 1e-9),
                            lr_at(s, s.warmup_epochs), abs_tol=1e-8)

    def test_range_and_validation(self):
        s = LrSchedule()
        with pytest.raises(ValueError):
            lr_at(s, -0.1)
        with pytest.raises(ValueError):
            lr_at(s, 50.1)
        with pytest.raises(ValueError):
            LrSchedule(lr0=0.0)
        with pytest.raises(ValueError):
            LrSchedule(final_fraction=0.0)
        with pytest.raises(ValueError):
            LrSchedule(warmup_epochs=50.0, total_epochs=50.0)


def adamw_reference(params, grads, steps, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Float64 AdamW from the published update rule (decoupled decay)."""
    params = [p.astype(np.float64).copy() for p in params]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    for t in range(1, steps + 1):
        for i, p in enumerate(params):
            g = grads[i].astype(np.float64)
            p -= lr * wd * p
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            mhat = m[i] / (1 - b1 ** t)
            vhat = v[i] / (1 - b2 ** t)
            p -= lr * mhat / (np.sqrt(vhat) + eps)
    return params


class TestAdamW:
    def test_single_step_is_signed_unit_move(self):
        """Fresh state, constant grad: the first step is ~ -lr * sign(g)."""
        p = Tensor(np.array([1.0, -2.0, 0.5], dtype=np.float32), requires_grad=True)
        p.grad = np.array([0.3, -0.7, 2.0], dtype=np.float32)
        before = p.data.copy()
        state = OptimState(weight_decay=0.0)
        adamw_step({"p": p}, state, lr=0.01)
        delta = p.data - before
        assert np.allclose(delta, -0.01 * np.sign(p.grad), atol=1e-6)

    def test_decoupled_decay_without_gradient(self):
        """Zero grad, wd=0.01, lr=0.001: parameter shrinks by exactly 1e-5 per step."""
        p = Tensor(np.array([4.0], dtype=np.float32), requires_grad=True)
        p.grad = np.zeros(1, dtype=np.float32)
        state = OptimState(weight_decay=0.01)
        adamw_step({"p": p}, state, lr=0.001)
        assert np.allclose(p.data, 4.0 * (1.0 - 1e-5), rtol=1e-7)
        # moments stay zero, so nothing but decay happened
        assert np.all(state.m["p"] == 0.0)

    def test_matches_reference_over_steps(self):
        rng = np.random.default_rng(7)
        arrs = [rng.standard_normal((3, 4)).astype(np.float32),
                rng.standard_normal(5).astype(np.float32)]
        grads = [rng.standard_normal(a.shape).astype(np.float32) for a in arrs]
        ps = {f"p{i}": Tensor(a.copy(), requires_grad=True) for i, a in enumerate(arrs)}
        for i, (_, p) in enumerate(ps.items()):
            p.grad = grads[i]
        state = OptimState(weight_decay=0.01)
        for _ in range(5):
            adamw_step(ps, state, lr=0.002)
        want = adamw_reference(arrs, grads, steps=5, lr=0.002, wd=0.01)
        for i, (_, p) in enumerate(ps.items()):
            assert np.allclose(p.data, want[i], rtol=1e-4, atol=1e-6)

    def test_nonfinite_gradient_rejects_whole_step(self):
        good = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        bad = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        good.grad = np.ones(2, dtype=np.float32)
        bad.grad = np.array([1.0, np.nan], dtype=np.float32)
        state = OptimState()
        with pytest.raises(FloatingPointError, match="bad"):
            adamw_step({"good": good, "bad": bad}, state, lr=0.01)
        # nothing moved, step counter untouched
        assert np.all(good.data == 1.0) and np.all(bad.data == 1.0)
        assert state.step == 0

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        p.grad = np.ones(2, dtype=np.float32)
        with pytest.raises(ValueError, match="p"):
            adamw_step({"p": p}, OptimState(), lr=0.01)

    def test_lr_validation(self):
        p = Tensor(np.ones(1, dtype=np.float32), requires_grad=True)
        p.grad = np.ones(1, dtype=np.float32)
        with pytest.raises(ValueError):
            adamw_step({"p": p}, OptimState(), lr=0.0)

    def test_converges_on_quadratic(self):
        """Minimizing 0.5*(p - c)^2 walks p to c."""
        c = np.array([1.0, -2.0, 3.0], dtype=np.float32)
        p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
        state = OptimState(weight_decay=0.0)
        for _ in range(400):
            p.grad = (p.data - c).astype(np.float32)
            adamw_step({"p": p}, state, lr=0.05)
        assert np.allclose(p.data, c, atol=0.05)
