"""Combine trial distributions into one: rank-weighted geometric means.

Per choice, the combined rate is exp(sum_j w_j ln(rate_j) / sum_j w_j)
with weights w_j = b^(-rank_j); larger b leans harder on the top-ranked
trials, b = 1 is the plain geometric mean. Distributions found on
different task pairs are merged with an unweighted per-choice geometric
mean.

Floating-point discipline: inputs are put in a canonical order before
summation (by rank, or by value where no rank exists), so permuting the
input list cannot change a single bit of the output; all-equal inputs
short-circuit to the shared value exactly.
"""

from __future__ import annotations

import math

import numpy as np

from .groups import LrDistribution, NUM_CHOICES
from .hpo import Trial

DEFAULT_B = 1.8


def combine_trials(
    trials: list[Trial], b: float = DEFAULT_B, top_k: int | None = None
) -> LrDistribution:
    """Rank-weighted geometric mean over completed, ranked trials.

    Per choice the result is clamped to the interval spanned by the trial
    rates, and a choice where every trial agrees passes through exactly.
    """
    if not trials:
        raise ValueError("cannot combine an empty trial set")
    if not math.isfinite(b) or b < 1.0:
        raise ValueError(f"b must be finite and >= 1, got {b}")
    for t in trials:
        if t.rank is None:
            raise ValueError(f"trial {t.id} has no rank; combine ranked trials only")
        if any(r <= 0 for r in t.rates):
            raise ValueError(f"trial {t.id} has a nonpositive rate")
    ranks = [t.rank for t in trials]
    if len(set(ranks)) != len(ranks):
        raise ValueError("trial ranks are not distinct")
    ordered = sorted(trials, key=lambda t: t.rank)
    if top_k is not None:
        if top_k < 1:
            raise ValueError("top_k must be >= 1")
        ordered = ordered[:top_k]
    log_b = math.log(b)
    weights = np.exp(np.array([-t.rank * log_b for t in ordered]))
    weight_sum = float(np.sum(weights))
    rates = []
    for i in range(NUM_CHOICES):
        vals = np.array([t.rates[i] for t in ordered])
        if np.all(vals == vals[0]):
            rates.append(float(vals[0]))
            continue
        log_mean = float(np.sum(np.log(vals) * weights)) / weight_sum
        combined = math.exp(log_mean)
        rates.append(min(max(combined, float(vals.min())), float(vals.max())))
    return LrDistribution(tuple(rates))


def combine_pairs(distributions: list[LrDistribution]) -> LrDistribution:
    """Unweighted per-choice geometric mean across task pairs."""
    if not distributions:
        raise ValueError("cannot combine an empty distribution list")
    if len(distributions) == 1:
        return distributions[0]
    rates = []
    for i in range(NUM_CHOICES):
        vals = np.sort(np.array([d[i] for d in distributions]))
        if vals[0] == vals[-1]:
            rates.append(float(vals[0]))
            continue
        rates.append(math.exp(float(np.mean(np.log(vals)))))
    return LrDistribution(tuple(rates))


def report_distribution(dist: LrDistribution) -> list[tuple[int, float]]:
    """(choice, rate) rows in choice order; what the CSV serializes."""
    return list(enumerate(dist.rates))


def format_distribution_csv(dist: LrDistribution) -> str:
    lines = ["choice,rate"]
    for choice, rate in report_distribution(dist):
        lines.append(f"{choice},{rate:.16e}")
    return "\n".join(lines) + "\n"


def write_distribution_csv(dist: LrDistribution, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_distribution_csv(dist))


def read_distribution_csv(path: str) -> LrDistribution:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "choice,rate":
        raise ValueError(f"{path}: expected header 'choice,rate'")
    rows = lines[1:]
    if len(rows) != NUM_CHOICES:
        raise ValueError(f"{path}: expected {NUM_CHOICES} data rows, got {len(rows)}")
    rates = []
    for want, row in enumerate(rows):
        try:
            choice_s, rate_s = row.split(",")
            choice, rate = int(choice_s), float(rate_s)
        except ValueError as exc:
            raise ValueError(f"{path}: bad row {row!r}: {exc}") from exc
        if choice != want:
            raise ValueError(f"{path}: choice {choice} out of order (expected {want})")
        rates.append(rate)
    return LrDistribution(tuple(rates))
