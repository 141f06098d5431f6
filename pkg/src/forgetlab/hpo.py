"""Learning-rate-distribution search: Hyperband brackets, a density-ratio
proposer over the 10-dimensional log-rate box, and the trial store.

Each rung run is its own trial: promotion re-runs the surviving
configurations from scratch at eta times the epoch budget under a fresh
trial id, so the JSONL log is a complete account of every training run.
Statuses: "completed" marks runs that were promoted or finished the
bracket's top rung, "pruned" marks runs eliminated at a rung barrier,
"diverged" marks numeric blow-ups (reward 0). Ranks are assigned once at
the end, over completed full-resource trials only.

Proposals and ids are fixed at bracket start and rung barriers, so a
multi-worker search evaluates the same trial set as a single-worker one;
bit-identical logs are only promised for one worker, where wall_time_s
is written as 0.0 to keep reruns byte-identical.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .groups import LR_MAX, LR_MIN, LrDistribution, NUM_CHOICES
from .model import ModelConfig
from .protocol import (
    DEFAULT_FLAT_LR,
    Phase1State,
    ProtocolConfig,
    run_phase1,
    run_sequential,
)
from .shifts import TaskPair

N_MIN_HISTORY = 10
GOOD_FRACTION = 0.25
N_CANDIDATES = 24
BANDWIDTH_FLOOR = 0.1  # decades


@dataclass(frozen=True)
class SearchSpace:
    low: float = LR_MIN
    high: float = LR_MAX

    def __post_init__(self) -> None:
        if not (0 < self.low < self.high):
            raise ValueError(f"bad search bounds [{self.low}, {self.high}]")

    @property
    def log_low(self) -> float:
        return math.log10(self.low)

    @property
    def log_high(self) -> float:
        return math.log10(self.high)


@dataclass
class Trial:
    id: int
    rates: tuple[float, ...]
    resource: int
    status: str  # completed | diverged | pruned
    p_o: float
    p_s: float
    reward: float
    rank: int | None = None
    wall_time_s: float = 0.0

    def dist(self) -> LrDistribution:
        return LrDistribution(self.rates)


@dataclass(frozen=True)
class Rung:
    n_configs: int
    resource: int


@dataclass(frozen=True)
class HyperbandPlan:
    max_resource: int
    eta: int
    brackets: tuple[tuple[Rung, ...], ...]

    def planned_epochs(self, epochs_o: int) -> int:
        """Total training epochs if nothing diverges (phase 1 included)."""
        return sum(
            rung.n_configs * (epochs_o + rung.resource)
            for bracket in self.brackets
            for rung in bracket
        )

    def planned_runs(self) -> int:
        return sum(rung.n_configs for bracket in self.brackets for rung in bracket)


def hyperband_plan(max_resource: int, eta: int) -> HyperbandPlan:
    """Brackets of successive halving; bracket s starts at resource R/eta^s.

    Bracket s opens with floor((s_max+1)/(s+1)) * eta^s configurations;
    each following rung keeps floor(n/eta) of them at eta times the
    epochs, ending at the full budget.
    """
    if max_resource < 1:
        raise ValueError("max_resource must be >= 1")
    if eta < 2:
        raise ValueError("eta must be >= 2")
    s_max = 0
    while eta ** (s_max + 1) <= max_resource:
        s_max += 1
    brackets = []
    for s in range(s_max, -1, -1):
        n = ((s_max + 1) // (s + 1)) * eta**s
        r = max_resource // eta**s
        rungs = []
        for i in range(s + 1):
            rungs.append(Rung(n, r))
            n = n // eta
            r = r * eta
        # integer rounding can leave the top rung shy of the full budget
        rungs[-1] = Rung(rungs[-1].n_configs, max_resource)
        brackets.append(tuple(rungs))
    return HyperbandPlan(max_resource=max_resource, eta=eta, brackets=tuple(brackets))


def _log_kde(x: float, centers: np.ndarray, bandwidth: float) -> float:
    """Log density of a Gaussian kernel mixture at x."""
    z = (x - centers) / bandwidth
    a = -0.5 * z * z
    m = a.max()
    return float(
        m
        + math.log(np.exp(a - m).sum())
        - math.log(len(centers))
        - math.log(bandwidth * math.sqrt(2.0 * math.pi))
    )


def _bandwidth(values: np.ndarray) -> float:
    bw = 1.06 * float(values.std()) * len(values) ** (-0.2)
    return max(bw, BANDWIDTH_FLOOR)


def propose(
    history: list[Trial], space: SearchSpace, rng: np.random.Generator
) -> LrDistribution:
    """Next distribution to try, given completed trials so far.

    Below N_MIN_HISTORY completed trials each dimension is sampled
    log-uniformly. Otherwise trials are split at the top-quarter reward
    boundary into good/bad sets, per-dimension Gaussian KDEs are fit in
    log10 space, and the best of N_CANDIDATES draws from the good density
    by good/bad density ratio wins.
    """
    lo, hi = space.log_low, space.log_high
    if len(history) < N_MIN_HISTORY:
        logs = rng.uniform(lo, hi, size=NUM_CHOICES)
        return LrDistribution(tuple(float(10.0**x) for x in logs))

    ordered = sorted(history, key=lambda t: (-t.reward, t.id))
    n_good = math.ceil(len(ordered) * GOOD_FRACTION)
    good = np.log10([t.rates for t in ordered[:n_good]])
    bad = np.log10([t.rates for t in ordered[n_good:]])
    good_bw = [_bandwidth(good[:, i]) for i in range(NUM_CHOICES)]
    bad_bw = [_bandwidth(bad[:, i]) for i in range(NUM_CHOICES)]

    candidates = np.empty((N_CANDIDATES, NUM_CHOICES))
    for c in range(N_CANDIDATES):
        for i in range(NUM_CHOICES):
            anchor = good[int(rng.integers(len(good))), i]
            candidates[c, i] = min(max(anchor + rng.normal(0.0, good_bw[i]), lo), hi)
    best, best_score = 0, -math.inf
    for c in range(N_CANDIDATES):
        score = sum(
            _log_kde(candidates[c, i], good[:, i], good_bw[i])
            - _log_kde(candidates[c, i], bad[:, i], bad_bw[i])
            for i in range(NUM_CHOICES)
        )
        if score > best_score:
            best, best_score = c, score
    return LrDistribution(tuple(float(10.0**x) for x in candidates[best]))


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


@dataclass
class TrialStore:
    trials: list[Trial]
    executed_epochs: int = 0
    # id of the flat baseline run at full resource (None only if the plan
    # is empty); the best completed reward can never fall below its reward
    flat_full_id: int | None = None

    def completed(self) -> list[Trial]:
        return [t for t in self.trials if t.status == "completed"]

    def ranked(self, max_resource: int) -> list[Trial]:
        """Completed full-resource trials in rank order."""
        full = [
            t
            for t in self.trials
            if t.status == "completed" and t.resource == max_resource
        ]
        return sorted(full, key=lambda t: t.rank if t.rank is not None else len(full))


def _run_one(task) -> tuple[Trial, int]:
    (pair, base_cfg, model_cfg, tid, rates, resource, phase1_state, measure) = task
    start = time.perf_counter()
    cfg = replace(base_cfg, dist=LrDistribution(rates), epochs_s=resource)
    try:
        result = run_sequential(
            pair,
            cfg,
            model_cfg,
            phase1_state=phase1_state.clone() if phase1_state is not None else None,
        )
        status, p_o, p_s, reward = (
            result.status,
            result.p_o,
            result.p_s,
            result.reward,
        )
        epochs = result.epochs_run
    except Exception:
        # a crashed worker counts as a diverged trial; the search goes on
        status, p_o, p_s, reward, epochs = "diverged", 0.0, 0.0, 0.0, 0
    wall = time.perf_counter() - start if measure else 0.0
    trial = Trial(
        id=tid,
        rates=rates,
        resource=resource,
        status=status,
        p_o=p_o,
        p_s=p_s,
        reward=reward,
        rank=None,
        wall_time_s=wall,
    )
    return trial, epochs


def run_search(
    pair: TaskPair,
    plan: HyperbandPlan,
    base_cfg: ProtocolConfig,
    model_cfg: ModelConfig,
    *,
    seed: int = 999,
    flat_lr: float = DEFAULT_FLAT_LR,
    workers: int = 1,
    phase2_only: bool = False,
    progress=None,
) -> TrialStore:
    """Execute the plan on one task pair; returns every run as a trial.

    Trial 0 is always the flat baseline, and the last bracket (which opens
    at full resource) also seats it, so the best completed full-resource
    reward can never fall below the baseline's. `phase2_only` trains
    phase 1 once with the flat baseline and reuses that snapshot for every
    trial (faster, but the searched rates then govern phase 2 only).
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    space = SearchSpace()
    store = TrialStore(trials=[])
    history: list[Trial] = []
    next_id = 0
    measure = workers > 1

    phase1_cache: Phase1State | None = None
    if phase2_only:
        flat_cfg = replace(base_cfg, dist=LrDistribution.flat(flat_lr))
        phase1_cache = run_phase1(pair, flat_cfg, model_cfg)
        store.executed_epochs += len(phase1_cache.curve)

    def execute(configs: list[tuple[int, tuple[float, ...]]], resource: int) -> list[Trial]:
        tasks = [
            (pair, base_cfg, model_cfg, tid, rates, resource, phase1_cache, measure)
            for tid, rates in configs
        ]
        if workers == 1:
            outcomes = [_run_one(t) for t in tasks]
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(_run_one, tasks))
        results = []
        for trial, epochs in outcomes:
            if phase1_cache is not None and epochs >= len(phase1_cache.curve):
                epochs -= len(phase1_cache.curve)  # cached epochs counted once
            store.executed_epochs += epochs
            store.trials.append(trial)
            results.append(trial)
            if progress is not None:
                progress(trial)
        return results

    last_b = len(plan.brackets) - 1
    for b_idx, bracket in enumerate(plan.brackets):
        configs: list[tuple[int, tuple[float, ...]]] = []
        for slot in range(bracket[0].n_configs):
            # flat is seeded twice: as trial 0, and in the last bracket,
            # whose opening rung already runs at full resource; the second
            # seat makes baseline dominance exact at the final budget
            if slot == 0 and b_idx in (0, last_b):
                dist = LrDistribution.flat(flat_lr)
                if b_idx == last_b:
                    store.flat_full_id = next_id
            else:
                dist = propose(history, space, np.random.default_rng([seed, b_idx, slot]))
            configs.append((next_id, dist.rates))
            next_id += 1
        for r_idx, rung in enumerate(bracket):
            results = execute(configs, rung.resource)
            finished = [t for t in results if t.status == "completed"]
            if r_idx == len(bracket) - 1:
                history.extend(finished)
                break
            keep = bracket[r_idx + 1].n_configs
            finished.sort(key=lambda t: (-t.reward, t.id))
            survivors = finished[:keep]
            survivor_ids = {t.id for t in survivors}
            for t in results:
                if t.status == "completed" and t.id not in survivor_ids:
                    t.status = "pruned"
            history.extend(survivors)
            if not survivors:
                break
            configs = []
            for t in survivors:
                configs.append((next_id, t.rates))
                next_id += 1

    full = [
        t
        for t in store.trials
        if t.status == "completed" and t.resource == plan.max_resource
    ]
    full.sort(key=lambda t: (-t.reward, t.id))
    for rank, t in enumerate(full):
        t.rank = rank
    return store


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_JSON_FIELDS = ("id", "rates", "resource", "status", "p_o", "p_s", "reward", "rank", "wall_time_s")


def trial_to_json(trial: Trial) -> str:
    record = {
        "id": trial.id,
        "rates": list(trial.rates),
        "resource": trial.resource,
        "status": trial.status,
        "p_o": trial.p_o,
        "p_s": trial.p_s,
        "reward": trial.reward,
        "rank": trial.rank,
        "wall_time_s": trial.wall_time_s,
    }
    return json.dumps(record)


def write_trials(path: str, trials: list[Trial]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trial in trials:
            fh.write(trial_to_json(trial) + "\n")


def read_trials(path: str) -> list[Trial]:
    trials = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                trials.append(
                    Trial(
                        id=int(rec["id"]),
                        rates=tuple(float(r) for r in rec["rates"]),
                        resource=int(rec["resource"]),
                        status=str(rec["status"]),
                        p_o=float(rec["p_o"]),
                        p_s=float(rec["p_s"]),
                        reward=float(rec["reward"]),
                        rank=None if rec["rank"] is None else int(rec["rank"]),
                        wall_time_s=float(rec["wall_time_s"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad trial record: {exc}") from exc
    if not trials:
        raise ValueError(f"{path}: no trials")
    return trials
