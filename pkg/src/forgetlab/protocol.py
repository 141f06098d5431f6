"""Sequential two-task evaluation: train on D_o, then D_s, score both.

Phase 1 trains body and a fresh head on D_o. Phase 2 reinitializes the
head (optionally adding the EWC penalty anchored at end-of-phase-1
weights) and trains on D_s. The final report carries p_o_before (D_o
test accuracy after phase 1), p_o (same metric after phase 2, evaluated
with the phase-1 head restored so the drop isolates body forgetting),
p_s, and the reward p_o + p_s.

Batches are homogeneous in sequence length (no padding, no masking):
examples are bucketed by length, shuffled within buckets, and the batch
order is shuffled per epoch. A non-finite loss anywhere marks the run
diverged with reward 0 instead of raising.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, NumericOverflowError
from .ewc import DEFAULT_LAMBDA, FisherState, estimate_fisher, penalty_node
from .groups import LrDistribution
from .model import (
    ModelConfig,
    build_loss,
    cls_embeddings,
    init_head,
    init_params,
    logits_of,
)
from .optim import Adam, AdamState
from .shifts import Dataset, TaskPair

# desk-scale stand-in for the usual fine-tuning rate of the full-size model;
# calibrated so the parity task trains reliably at the default model size
DEFAULT_FLAT_LR = 6e-4

EVAL_BATCH = 128

# seed-stream tags so enabling one feature never shifts another's draws
_TAG_HEAD1 = 11
_TAG_HEAD2 = 12
_TAG_SHUFFLE1 = 21
_TAG_SHUFFLE2 = 22
_TAG_FISHER = 31


@dataclass(frozen=True)
class ProtocolConfig:
    dist: LrDistribution
    epochs_o: int = 5
    epochs_s: int = 5
    batch_size: int = 16
    seed: int = 999
    ewc_enabled: bool = False
    ewc_lambda: float = DEFAULT_LAMBDA
    fisher_samples: int = 64
    retain_moments: bool = False

    def __post_init__(self) -> None:
        if self.epochs_o < 1 or self.epochs_s < 1:
            raise ValueError("epochs must be >= 1 in both phases")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.fisher_samples < 1:
            raise ValueError("fisher_samples must be >= 1")
        if self.ewc_lambda < 0:
            raise ValueError("ewc_lambda must be >= 0")


@dataclass(frozen=True)
class ProtocolResult:
    status: str  # completed | diverged
    p_o_before: float
    p_o: float
    p_s: float
    reward: float
    loss_curve_o: tuple[float, ...]
    loss_curve_s: tuple[float, ...]

    @property
    def epochs_run(self) -> int:
        return len(self.loss_curve_o) + len(self.loss_curve_s)


class Bucketed:
    """Dataset grouped into homogeneous-length id/label arrays."""

    def __init__(self, ds: Dataset) -> None:
        by_len: dict[int, list[int]] = {}
        for i, (seq, _) in enumerate(ds.examples):
            by_len.setdefault(len(seq), []).append(i)
        self.parts: list[tuple[np.ndarray, np.ndarray]] = []
        for length in sorted(by_len):
            idx = by_len[length]
            ids = np.array([ds.examples[i][0] for i in idx], dtype=np.int64)
            labels = np.array([ds.examples[i][1] for i in idx], dtype=np.int64)
            self.parts.append((ids, labels))
        self.size = len(ds.examples)

    def batches_per_epoch(self, batch_size: int) -> int:
        return sum(-(-len(ids) // batch_size) for ids, _ in self.parts)

    def epoch_batches(
        self, batch_size: int, rng: np.random.Generator
    ) -> list[tuple[np.ndarray, np.ndarray]]:
        batches = []
        for ids, labels in self.parts:
            order = rng.permutation(len(ids))
            for lo in range(0, len(ids), batch_size):
                chunk = order[lo : lo + batch_size]
                batches.append((ids[chunk], labels[chunk]))
        return [batches[i] for i in rng.permutation(len(batches))]

    def eval_batches(self, batch_size: int) -> list[tuple[np.ndarray, np.ndarray]]:
        batches = []
        for ids, labels in self.parts:
            for lo in range(0, len(ids), batch_size):
                batches.append((ids[lo : lo + batch_size], labels[lo : lo + batch_size]))
        return batches


def dataset_cls_embeddings(
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    ds: Dataset,
    batch_size: int = EVAL_BATCH,
) -> np.ndarray:
    """[CLS] embedding per example, rows aligned with `ds.examples`."""
    by_len: dict[int, list[int]] = {}
    for i, (seq, _) in enumerate(ds.examples):
        by_len.setdefault(len(seq), []).append(i)
    out = np.zeros((len(ds.examples), cfg.d_model))
    for length in sorted(by_len):
        idx = by_len[length]
        ids = np.array([ds.examples[i][0] for i in idx], dtype=np.int64)
        for lo in range(0, len(idx), batch_size):
            out[idx[lo : lo + batch_size]] = cls_embeddings(
                cfg, params, ids[lo : lo + batch_size]
            )
    return out


def evaluate(
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    head: dict[str, np.ndarray] | None,
    ds: Dataset,
    batch_size: int = EVAL_BATCH,
) -> float:
    """Argmax accuracy on `ds`; ties resolve to the lower class index."""
    if len(ds) == 0:
        raise ValueError(f"cannot evaluate on empty dataset {ds.name!r}")
    full = dict(params)
    if head is not None:
        full.update(head)
    correct = 0
    for ids, labels in Bucketed(ds).eval_batches(batch_size):
        pred = logits_of(cfg, full, ids).argmax(axis=1)
        correct += int((pred == labels).sum())
    return correct / len(ds)


def _train_phase(
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    bucketed: Bucketed,
    rates: dict[str, float],
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    curve: list[float],
    *,
    fisher: FisherState | None = None,
    carried: AdamState | None = None,
) -> AdamState:
    """Train in place for `epochs`, appending per-epoch mean loss to `curve`."""
    total_steps = epochs * bucketed.batches_per_epoch(batch_size)
    adam = Adam(params, rates, total_steps, state=carried)
    for _ in range(epochs):
        losses = []
        for ids, labels in bucketed.epoch_batches(batch_size, rng):
            graph = Graph()
            loss, _, leaves = build_loss(graph, cfg, params, ids, labels)
            if fisher is not None:
                loss = graph.apply("add", loss, penalty_node(graph, leaves, fisher))
            node_grads = graph.backward(loss)
            adam.step(params, {name: node_grads[nid] for name, nid in leaves.items()})
            losses.append(float(graph.value(loss)))
        curve.append(sum(losses) / len(losses))
    return adam.state


@dataclass
class Phase1State:
    """End-of-phase-1 snapshot, reusable across phase-2-only trials."""

    params: dict[str, np.ndarray]
    p_o_before: float
    curve: tuple[float, ...]
    adam_state: AdamState

    def clone(self) -> "Phase1State":
        return Phase1State(
            params={n: p.copy() for n, p in self.params.items()},
            p_o_before=self.p_o_before,
            curve=self.curve,
            adam_state=AdamState(
                m={n: a.copy() for n, a in self.adam_state.m.items()},
                v={n: a.copy() for n, a in self.adam_state.v.items()},
                t=self.adam_state.t,
            ),
        )


def run_phase1(pair: TaskPair, cfg: ProtocolConfig, model_cfg: ModelConfig) -> Phase1State:
    """Train phase 1 only; raises NumericOverflowError on divergence."""
    params = init_params(model_cfg)
    params.update(init_head(model_cfg, [cfg.seed, _TAG_HEAD1]))
    rates = cfg.dist.param_rates(model_cfg)
    curve: list[float] = []
    adam_state = _train_phase(
        model_cfg,
        params,
        Bucketed(pair.o_train),
        rates,
        cfg.epochs_o,
        cfg.batch_size,
        np.random.default_rng([cfg.seed, _TAG_SHUFFLE1]),
        curve,
    )
    p_o_before = evaluate(model_cfg, params, None, pair.o_test)
    return Phase1State(
        params=params, p_o_before=p_o_before, curve=tuple(curve), adam_state=adam_state
    )


def run_sequential(
    pair: TaskPair,
    cfg: ProtocolConfig,
    model_cfg: ModelConfig,
    *,
    phase1_state: Phase1State | None = None,
) -> ProtocolResult:
    """Full two-phase run; a non-finite loss yields status "diverged".

    `phase1_state` short-circuits phase 1 with a precomputed snapshot
    (cloned, never mutated); the caller owns the decision of which
    distribution that snapshot was trained with.
    """
    curve_o: list[float] = []
    curve_s: list[float] = []
    p_o_before = 0.0
    try:
        if phase1_state is None:
            phase1 = run_phase1(pair, cfg, model_cfg)
        else:
            phase1 = phase1_state.clone()
        params = phase1.params
        p_o_before = phase1.p_o_before
        curve_o.extend(phase1.curve)
        head1 = {"head.w": params["head.w"].copy(), "head.b": params["head.b"].copy()}

        fisher = None
        if cfg.ewc_enabled:
            fisher = estimate_fisher(
                model_cfg,
                params,
                [seq for seq, _ in pair.o_train.examples],
                cfg.fisher_samples,
                np.random.default_rng([cfg.seed, _TAG_FISHER]),
                cfg.ewc_lambda,
            )

        params.update(init_head(model_cfg, [cfg.seed, _TAG_HEAD2]))
        rates = cfg.dist.param_rates(model_cfg)
        _train_phase(
            model_cfg,
            params,
            Bucketed(pair.s_train),
            rates,
            cfg.epochs_s,
            cfg.batch_size,
            np.random.default_rng([cfg.seed, _TAG_SHUFFLE2]),
            curve_s,
            fisher=fisher,
            carried=phase1.adam_state if cfg.retain_moments else None,
        )
        p_s = evaluate(model_cfg, params, None, pair.s_test)
        p_o = evaluate(model_cfg, params, head1, pair.o_test)
        return ProtocolResult(
            status="completed",
            p_o_before=p_o_before,
            p_o=p_o,
            p_s=p_s,
            reward=p_o + p_s,
            loss_curve_o=tuple(curve_o),
            loss_curve_s=tuple(curve_s),
        )
    except NumericOverflowError:
        return ProtocolResult(
            status="diverged",
            p_o_before=p_o_before,
            p_o=0.0,
            p_s=0.0,
            reward=0.0,
            loss_curve_o=tuple(curve_o),
            loss_curve_s=tuple(curve_s),
        )
