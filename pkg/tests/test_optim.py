"""Schedule exactness and Adam update semantics."""

from __future__ import annotations

import math

import numpy as np
import pytest

from forgetlab.optim import (
    ADAM_EPS,
    Adam,
    AdamState,
    adam_update,
    init_adam_state,
    schedule_lr,
    warmup_steps,
)


class TestWarmupSteps:
    @pytest.mark.parametrize(
        "total,frac,expected",
        [
            (100, 0.1, 10),
            (101, 0.1, 11),
            (9, 0.1, 1),
            (120, 0.1, 12),
            (7, 0.3, 3),
            (10, 0.15, 2),
        ],
    )
    def test_ceil_of_fraction(self, total, frac, expected):
        assert warmup_steps(total, frac) == expected

    def test_float_noise_does_not_leak(self):
        # 0.1 * 30 is 3.0000000000000004 in floats; the exact answer is 3
        assert warmup_steps(30, 0.1) == 3

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError, match="total_steps"):
            warmup_steps(0)
        with pytest.raises(ValueError, match="warmup_fraction"):
            warmup_steps(10, 0.0)
        with pytest.raises(ValueError, match="warmup_fraction"):
            warmup_steps(10, 1.0)


class TestScheduleLr:
    def test_zero_at_step_zero(self):
        assert schedule_lr(0.3, 0, 100) == 0.0

    def test_exact_peak_at_warmup_end(self):
        assert schedule_lr(0.3, 10, 100) == 0.3

    def test_exact_zero_at_total(self):
        assert schedule_lr(0.3, 100, 100) == 0.0

    def test_half_peak_at_midpoint(self):
        # decay spans steps 12..120; its midpoint is step 66
        peak = 6e-4
        lr = schedule_lr(peak, 66, 120)
        assert abs(lr - peak / 2.0) <= 1e-12 * peak

    def test_linear_warmup(self):
        peak = 1.0
        vals = [schedule_lr(peak, s, 100) for s in range(11)]
        np.testing.assert_allclose(vals, [s / 10 for s in range(11)], rtol=1e-15)

    def test_nonincreasing_after_warmup(self):
        vals = [schedule_lr(1.0, s, 200) for s in range(20, 201)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_step_out_of_range(self):
        with pytest.raises(ValueError, match="outside"):
            schedule_lr(1.0, -1, 100)
        with pytest.raises(ValueError, match="outside"):
            schedule_lr(1.0, 101, 100)


class TestAdamUpdate:
    def test_first_step_hand_value(self):
        # m-hat = g, v-hat = g^2, so the move is lr * g / (|g| + eps)
        params = {"p": np.array([0.0])}
        state = init_adam_state(params)
        adam_update(params, {"p": np.array([1.0])}, state, {"p": 1.0}, 1.0)
        expected = -1.0 / (1.0 + ADAM_EPS)
        assert abs(params["p"][0] - expected) <= 1e-12

    def test_zero_rate_freezes_but_moments_advance(self):
        params = {"a": np.array([1.0]), "b": np.array([1.0])}
        state = init_adam_state(params)
        grads = {"a": np.array([2.0]), "b": np.array([2.0])}
        adam_update(params, grads, state, {"a": 0.0, "b": 1e-2}, 1.0)
        assert params["a"][0] == 1.0
        assert params["b"][0] != 1.0
        assert state.m["a"][0] != 0.0 and state.v["a"][0] != 0.0
        assert state.t == 1

    def test_zero_factor_freezes_everything(self):
        params = {"a": np.array([1.0])}
        state = init_adam_state(params)
        adam_update(params, {"a": np.array([3.0])}, state, {"a": 1e-2}, 0.0)
        assert params["a"][0] == 1.0
        assert state.t == 1

    def test_missing_gradient_rejected(self):
        params = {"a": np.array([1.0]), "b": np.array([1.0])}
        state = init_adam_state(params)
        with pytest.raises(ValueError, match=r"missing gradient.*'b'"):
            adam_update(params, {"a": np.array([1.0])}, state, {"a": 1e-2, "b": 1e-2}, 1.0)

    def test_updates_in_place(self):
        arr = np.array([0.5, -0.5])
        params = {"p": arr}
        state = init_adam_state(params)
        adam_update(params, {"p": np.array([1.0, -1.0])}, state, {"p": 1e-2}, 1.0)
        assert params["p"] is arr

    def test_two_steps_match_reference(self):
        rng = np.random.default_rng(0)
        p0 = rng.normal(size=4)
        g1, g2 = rng.normal(size=4), rng.normal(size=4)
        params = {"p": p0.copy()}
        state = init_adam_state(params)
        adam_update(params, {"p": g1}, state, {"p": 1e-2}, 1.0)
        adam_update(params, {"p": g2}, state, {"p": 1e-2}, 0.5)

        # straightforward textbook recurrence, kept independent of the
        # in-place arithmetic above
        m = v = np.zeros(4)
        p = p0.copy()
        for t, (g, lr) in enumerate([(g1, 1e-2), (g2, 5e-3)], start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9**t)
            vhat = v / (1 - 0.999**t)
            p = p - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        np.testing.assert_allclose(params["p"], p, rtol=1e-12)


class TestAdamClass:
    def _params(self):
        return {"w": np.array([1.0, 2.0]), "b": np.array([0.0])}

    def test_scalar_rate_broadcasts(self):
        opt = Adam(self._params(), 1e-3, total_steps=10)
        assert opt.rates == {"w": 1e-3, "b": 1e-3}

    def test_missing_rate_rejected(self):
        with pytest.raises(ValueError, match="no peak rate.*'b'"):
            Adam(self._params(), {"w": 1e-3}, total_steps=10)

    @pytest.mark.parametrize("bad", [-1e-3, float("nan"), float("inf")])
    def test_invalid_rate_rejected(self, bad):
        with pytest.raises(ValueError, match="finite"):
            Adam(self._params(), {"w": bad, "b": 1e-3}, total_steps=10)

    def test_first_step_factor_is_zero(self):
        params = self._params()
        before = {k: v.copy() for k, v in params.items()}
        opt = Adam(params, 1e-2, total_steps=10)
        assert opt.current_factor() == 0.0
        opt.step(params, {"w": np.array([1.0, 1.0]), "b": np.array([1.0])})
        assert all(np.array_equal(params[k], before[k]) for k in params)
        assert opt.state.t == 1
        assert opt.sched_step == 1

    def test_factor_follows_schedule(self):
        opt = Adam(self._params(), 1e-2, total_steps=20)
        grads = {"w": np.array([1.0, 1.0]), "b": np.array([1.0])}
        params = self._params()
        seen = []
        for _ in range(20):
            seen.append(opt.current_factor())
            opt.step(params, grads)
        expected = [schedule_lr(1.0, s, 20) for s in range(20)]
        assert seen == expected

    def test_factor_clamps_past_total(self):
        opt = Adam(self._params(), 1e-2, total_steps=2)
        params = self._params()
        grads = {"w": np.array([1.0, 1.0]), "b": np.array([1.0])}
        for _ in range(4):
            opt.step(params, grads)
        assert opt.current_factor() == 0.0

    def test_carried_state_is_copied(self):
        params = self._params()
        first = Adam(params, 1e-2, total_steps=10)
        grads = {"w": np.array([1.0, 1.0]), "b": np.array([1.0])}
        for _ in range(3):
            first.step(params, grads)
        carried = Adam(params, 1e-2, total_steps=10, state=first.state)
        assert carried.state is not first.state
        assert carried.state.t == first.state.t
        assert carried.sched_step == 0
        carried.state.m["w"][0] += 1.0
        assert carried.state.m["w"][0] != first.state.m["w"][0]

    def test_carried_state_must_match_params(self):
        other = {"q": np.array([1.0])}
        state = init_adam_state(other)
        with pytest.raises(ValueError, match="carried-over state"):
            Adam(self._params(), 1e-2, total_steps=10, state=state)

    def test_state_dataclass_fields(self):
        state = init_adam_state(self._params())
        assert isinstance(state, AdamState)
        assert state.t == 0
        assert set(state.m) == {"w", "b"}
        assert not state.v["w"].any()

    def test_warmup_uses_fraction(self):
        opt = Adam(self._params(), 1e-2, total_steps=100, warmup_fraction=0.25)
        assert opt.warmup == 25
        assert math.isclose(
            schedule_lr(1.0, 25, 100, 0.25), 1.0, rel_tol=0, abs_tol=0
        )
