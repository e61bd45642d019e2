"""Adam recurrence against a hand-unrolled oracle; schedule shape."""

import math

import numpy as np
import pytest

from speccont.autodiff import NonFiniteError, Tensor, square
from speccont.optim import AdamState, adam_step, lr_schedule


def quadratic_grad(params):
    loss = square(params["w"]).sum()
    loss.backward()
    return loss.item()


class TestAdam:
    def test_two_steps_match_hand_recurrence(self):
        # Scalar w0=1, loss w^2, so g = 2w.  Unroll Adam by hand:
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
        w = 1.0
        m = v = 0.0
        expect = []
        for t in (1, 2):
            g = 2.0 * w
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            w = w - lr * mhat / (math.sqrt(vhat) + eps)
            expect.append(w)

        params = {"w": Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)}
        state = AdamState()
        for step in range(2):
            quadratic_grad(params)
            adam_step(params, state, lr=0.1)
            np.testing.assert_allclose(params["w"].data, expect[step], rtol=1e-6)
        assert state.step_count == 2

    def test_first_step_size_is_lr(self):
        # Bias correction makes |update| ~= lr on step 1 regardless of g scale.
        for scale in (1e-3, 1.0, 1e3):
            p = {"w": Tensor(np.array([scale], dtype=np.float64), requires_grad=True)}
            p["w"].grad = np.array([scale], dtype=np.float64)
            before = p["w"].data.copy()
            adam_step(p, AdamState(), lr=0.01)
            np.testing.assert_allclose(abs(before - p["w"].data), 0.01, rtol=1e-4)

    def test_rejects_nonfinite_gradient_without_mutation(self):
        p = {
            "a": Tensor(np.ones(2, dtype=np.float32), requires_grad=True),
            "b": Tensor(np.ones(2, dtype=np.float32), requires_grad=True),
        }
        p["a"].grad = np.ones(2, dtype=np.float32)
        p["b"].grad = np.array([1.0, np.nan], dtype=np.float32)
        state = AdamState()
        with pytest.raises(NonFiniteError, match="'b'"):
            adam_step(p, state, lr=0.1)
        np.testing.assert_array_equal(p["a"].data, 1.0)
        assert state.step_count == 0 and not state.m

    def test_rejects_missing_gradient(self):
        p = {"w": Tensor(np.ones(1), requires_grad=True)}
        with pytest.raises(ValueError, match="no gradient"):
            adam_step(p, AdamState(), lr=0.1)

    def test_grads_cleared_after_step(self):
        p = {"w": Tensor(np.ones(1, dtype=np.float32), requires_grad=True)}
        p["w"].grad = np.ones(1, dtype=np.float32)
        adam_step(p, AdamState(), lr=0.1)
        assert p["w"].grad is None

    def test_converges_on_quadratic(self):
        p = {"w": Tensor(np.array([5.0, -3.0], dtype=np.float32), requires_grad=True)}
        state = AdamState()
        for _ in range(400):
            quadratic_grad(p)
            adam_step(p, state, lr=0.05)
        assert np.abs(p["w"].data).max() < 1e-2


class TestSchedule:
    def test_linear_warmup(self):
        peak, warm = 3.5e-4, 8000
        assert lr_schedule(1, peak, warm) == pytest.approx(peak / warm)
        assert lr_schedule(4000, peak, warm) == pytest.approx(peak / 2)
        assert lr_schedule(8000, peak, warm) == pytest.approx(peak)

    def test_inverse_sqrt_decay(self):
        peak, warm = 3.5e-4, 8000
        assert lr_schedule(32000, peak, warm) == pytest.approx(peak / 2)
        assert lr_schedule(16000, peak, warm) == pytest.approx(peak / math.sqrt(2))

    def test_continuous_at_boundary(self):
        peak, warm = 3.5e-4, 8000
        left = lr_schedule(warm - 1, peak, warm)
        right = lr_schedule(warm + 1, peak, warm)
        assert abs(left - peak) < peak * 1e-3
        assert abs(right - peak) < peak * 1e-3

    def test_peak_is_max(self):
        peak, warm = 3.5e-4, 8000
        vals = [lr_schedule(s, peak, warm) for s in range(1, 40000, 37)]
        assert max(vals) <= peak * (1 + 1e-12)

    def test_rejects_step_zero(self):
        with pytest.raises(ValueError):
            lr_schedule(0)
