"""Elastic weight consolidation: diagonal Fisher plus quadratic penalty.

The anchor task is a miniature of masked-token pretraining: one random
non-[CLS] position per sequence is replaced by the reserved id 0 and a
throwaway linear head over the vocabulary predicts the original token.
The Fisher diagonal is the mean over anchor samples of the squared
per-sample gradient of that sample's log-likelihood, taken over body
parameters only (the classification head is reinitialized between phases
and carries no protected knowledge; the throwaway head is excluded too).

During the second training phase the penalty (lambda/2) * sum F (theta -
theta*)^2 is added to the loss as graph ops, so its gradient
lambda * F * (theta - theta*) arrives through the usual backward sweep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, ShapeError
from .model import ModelConfig, build_encoder, init_head

DEFAULT_LAMBDA = 675.0


@dataclass(frozen=True)
class FisherState:
    """Immutable bundle: Fisher diagonal, anchor weights, strength."""

    fisher: dict[str, np.ndarray]
    anchor: dict[str, np.ndarray]
    lam: float

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if set(self.fisher) != set(self.anchor):
            raise ValueError("fisher and anchor parameter sets differ")
        for name, f in self.fisher.items():
            if f.shape != self.anchor[name].shape:
                raise ShapeError(
                    f"fisher/anchor shape mismatch for {name!r}: "
                    f"{f.shape} vs {self.anchor[name].shape}"
                )
            if f.size and f.min() < 0:
                raise ValueError(f"fisher for {name!r} has negative entries")


def fisher_from_sample_grads(sample_grads: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Mean of elementwise squared per-sample gradients."""
    if not sample_grads:
        raise ValueError("need at least one sample gradient")
    acc = {name: np.zeros_like(g) for name, g in sample_grads[0].items()}
    for grads in sample_grads:
        for name, g in grads.items():
            acc[name] += g * g
    n = len(sample_grads)
    return {name: a / n for name, a in acc.items()}


def estimate_fisher(
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    anchor_sequences: list[tuple[int, ...]],
    n_samples: int,
    rng: np.random.Generator,
    lam: float = DEFAULT_LAMBDA,
) -> FisherState:
    """Diagonal Fisher over body parameters at the current `params`.

    Draws `n_samples` sequences (with replacement) from
    `anchor_sequences`, masks one position each, and accumulates squared
    log-likelihood gradients. theta* is a deep copy of the body.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    if not anchor_sequences:
        raise ValueError("anchor data is empty")
    body = {n: p for n, p in params.items() if not n.startswith("head.")}
    vocab_head = init_head(cfg, rng.integers(0, 2**63 - 1), n_out=cfg.vocab_size)
    picks = rng.integers(0, len(anchor_sequences), size=n_samples)
    sample_grads = []
    for pick in picks:
        seq = anchor_sequences[int(pick)]
        pos = int(rng.integers(0, len(seq)))
        ids = np.array([seq], dtype=np.int64)
        target = int(ids[0, pos])
        ids[0, pos] = 0  # reserved id doubles as the mask marker
        graph = Graph()
        states, leaves = build_encoder(graph, cfg, body, ids, allow_reserved=True)
        at_mask = graph.apply("select", states, axis=1, index=pos + 1)
        hw = graph.leaf(vocab_head["head.w"])
        hb = graph.leaf(vocab_head["head.b"])
        logits = graph.apply("broadcast_add", graph.apply("matmul", at_mask, hw), hb)
        nll = graph.apply("cross_entropy", logits, labels=np.array([target]))
        loglik = graph.apply("scale", graph.apply("sum", nll), factor=-1.0)
        node_grads = graph.backward(loglik)
        sample_grads.append({name: node_grads[nid] for name, nid in leaves.items()})
    fisher = fisher_from_sample_grads(sample_grads)
    anchor = {name: p.copy() for name, p in body.items()}
    return FisherState(fisher=fisher, anchor=anchor, lam=float(lam))


def penalty_node(graph: Graph, leaves: dict[str, int], fs: FisherState) -> int:
    """Append (lam/2) * sum F (theta - theta*)^2 to `graph`; returns its node.

    `leaves` maps parameter names to their leaf nodes in `graph`; every
    Fisher entry must have a matching leaf.
    """
    missing = sorted(set(fs.fisher) - set(leaves))
    if missing:
        raise ValueError(f"no graph leaf for anchored parameters: {missing}")
    total: int | None = None
    for name in fs.fisher:
        diff = graph.apply("add", leaves[name], graph.leaf(-fs.anchor[name]))
        sq = graph.apply("mul", diff, diff)
        weighted = graph.apply("mul", graph.leaf(fs.fisher[name]), sq)
        part = graph.apply("sum", weighted)
        total = part if total is None else graph.apply("add", total, part)
    assert total is not None
    return graph.apply("scale", total, factor=0.5 * fs.lam)


def ewc_penalty(params: dict[str, np.ndarray], fs: FisherState) -> float:
    """Penalty value at `params` (head entries ignored)."""
    graph = Graph()
    leaves = {
        name: graph.leaf(params[name]) for name in fs.fisher
    }
    return float(graph.value(penalty_node(graph, leaves, fs)))
