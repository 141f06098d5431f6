"""Adam with per-parameter peak rates and a warmup/cosine-decay schedule.

The schedule ramps linearly from 0 to the peak over the first
ceil(warmup_fraction * total_steps) steps, hits the peak exactly at
warmup end, follows a half cosine down, and is exactly 0 at
`total_steps`. Training uses 0-based step indices: the rate for an
update is read at the current index, which then advances, so index
`total_steps` itself is never consumed by an update.

No weight decay, no gradient clipping. A peak rate of 0.0 freezes a
parameter exactly (moments still accumulate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
WARMUP_FRACTION = 0.1


def warmup_steps(total_steps: int, warmup_fraction: float = WARMUP_FRACTION) -> int:
    """ceil(warmup_fraction * total_steps), exact via rational arithmetic."""
    if total_steps < 1:
        raise ValueError("total_steps must be positive")
    if not 0.0 < warmup_fraction < 1.0:
        raise ValueError("warmup_fraction must lie in (0, 1)")
    return math.ceil(Fraction(str(warmup_fraction)) * total_steps)


def schedule_lr(
    peak: float,
    step: int,
    total_steps: int,
    warmup_fraction: float = WARMUP_FRACTION,
) -> float:
    """Scheduled learning rate at `step`; exact peak at warmup end, 0 at the end."""
    w = warmup_steps(total_steps, warmup_fraction)
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < w:
        return peak * (step / w)
    if step >= total_steps:
        return 0.0
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (total_steps - w)))


@dataclass
class AdamState:
    """Moment accumulators; hand to a new Adam to carry them across phases."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int


def init_adam_state(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(p) for name, p in params.items()},
        v={name: np.zeros_like(p) for name, p in params.items()},
        t=0,
    )


def adam_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    rates: dict[str, float],
    factor: float,
) -> None:
    """One bias-corrected Adam update in place, rates scaled by `factor`."""
    missing = sorted(set(params) - set(grads))
    if missing:
        raise ValueError(f"missing gradient for parameters: {missing}")
    state.t += 1
    b1c = 1.0 - ADAM_BETA1**state.t
    b2c = 1.0 - ADAM_BETA2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += g * (1.0 - ADAM_BETA1)
        v *= ADAM_BETA2
        scratch = np.multiply(g, g)
        scratch *= 1.0 - ADAM_BETA2
        v += scratch
        lr = rates[name] * factor
        if lr == 0.0:
            continue
        np.divide(m, b1c, out=scratch)
        scratch *= lr
        denom = v / b2c
        np.sqrt(denom, out=denom)
        denom += ADAM_EPS
        scratch /= denom
        p -= scratch


class Adam:
    """Schedule-aware trainer state for one training phase."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        rates: dict[str, float] | float,
        total_steps: int,
        *,
        warmup_fraction: float = WARMUP_FRACTION,
        state: AdamState | None = None,
    ) -> None:
        if isinstance(rates, (int, float)):
            rates = {name: float(rates) for name in params}
        missing = sorted(set(params) - set(rates))
        if missing:
            raise ValueError(f"no peak rate for parameters: {missing}")
        for name in params:
            r = rates[name]
            if not math.isfinite(r) or r < 0.0:
                raise ValueError(f"peak rate for {name!r} must be finite and >= 0")
        self.rates = {name: float(rates[name]) for name in params}
        self.total_steps = int(total_steps)
        self.warmup_fraction = warmup_fraction
        self.warmup = warmup_steps(self.total_steps, warmup_fraction)
        if state is None:
            self.state = init_adam_state(params)
        else:
            if set(state.m) != set(params):
                raise ValueError("carried-over state does not match parameters")
            self.state = AdamState(
                m={name: a.copy() for name, a in state.m.items()},
                v={name: a.copy() for name, a in state.v.items()},
                t=state.t,
            )
        # schedule position is per-phase even when moments carry over
        self.sched_step = 0

    def current_factor(self) -> float:
        step = min(self.sched_step, self.total_steps)
        return schedule_lr(1.0, step, self.total_steps, self.warmup_fraction)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Apply one update in place; `grads` must cover every parameter."""
        factor = self.current_factor()
        self.sched_step += 1
        adam_update(params, grads, self.state, self.rates, factor)
