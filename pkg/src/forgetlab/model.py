"""Small post-norm transformer encoder for sequence classification.

The encoder prepends a reserved [CLS] token (id 0) to every sequence and
classifies from that position's final state. Datasets never emit id 0;
masked-token pretraining reuses it as the mask marker, which is why the
forward pass only admits id 0 behind `allow_reserved`.

Parameters live in a flat dict keyed by group-qualified names
("embeddings.token", "layer_3.attn_q_w", "head.w") so per-group learning
rates and group mapping stay simple string-prefix logic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, ShapeError

CLS_ID = 0


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    max_seq_len: int = 16
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 12
    d_ff: int = 64
    n_classes: int = 2
    seed: int = 999

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2 (id 0 is reserved)")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.n_layers < 1:
            raise ValueError("n_layers must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")


_LAYER_WEIGHTS = ("attn_q_w", "attn_k_w", "attn_v_w", "attn_o_w")


def layer_param_names(index: int) -> list[str]:
    """Parameter names of encoder layer `index` (1-based)."""
    p = f"layer_{index}."
    names = []
    for w in _LAYER_WEIGHTS:
        names.append(p + w)
        names.append(p + w[:-1] + "b")
    names += [p + "ln1_g", p + "ln1_b"]
    names += [p + "ff1_w", p + "ff1_b", p + "ff2_w", p + "ff2_b"]
    names += [p + "ln2_g", p + "ln2_b"]
    return names


def param_names(cfg: ModelConfig) -> list[str]:
    names = ["embeddings.token", "embeddings.position"]
    for i in range(1, cfg.n_layers + 1):
        names += layer_param_names(i)
    names += ["head.w", "head.b"]
    return names


def param_count(cfg: ModelConfig) -> int:
    """Closed-form total parameter count (105186 at defaults)."""
    d, ff = cfg.d_model, cfg.d_ff
    emb = cfg.vocab_size * d + (cfg.max_seq_len + 1) * d
    per_layer = 4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d) + 2 * d
    head = d * cfg.n_classes + cfg.n_classes
    return emb + cfg.n_layers * per_layer + head


def init_head(cfg: ModelConfig, seed: int, n_out: int | None = None) -> dict[str, np.ndarray]:
    """Fresh classification head; `n_out` overrides the class count."""
    rng = np.random.default_rng(seed)
    n_out = cfg.n_classes if n_out is None else n_out
    std = 1.0 / math.sqrt(cfg.d_model)
    return {
        "head.w": rng.normal(0.0, std, size=(cfg.d_model, n_out)),
        "head.b": np.zeros(n_out),
    }


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Seeded init: N(0, 1/sqrt(d_model)) weights, zero biases, unit gains."""
    rng = np.random.default_rng(cfg.seed)
    d, ff = cfg.d_model, cfg.d_ff
    std = 1.0 / math.sqrt(d)
    params: dict[str, np.ndarray] = {}
    params["embeddings.token"] = rng.normal(0.0, std, size=(cfg.vocab_size, d))
    params["embeddings.position"] = rng.normal(0.0, std, size=(cfg.max_seq_len + 1, d))
    for i in range(1, cfg.n_layers + 1):
        p = f"layer_{i}."
        for w in _LAYER_WEIGHTS:
            params[p + w] = rng.normal(0.0, std, size=(d, d))
            params[p + w[:-1] + "b"] = np.zeros(d)
        params[p + "ln1_g"] = np.ones(d)
        params[p + "ln1_b"] = np.zeros(d)
        params[p + "ff1_w"] = rng.normal(0.0, std, size=(d, ff))
        params[p + "ff1_b"] = np.zeros(ff)
        params[p + "ff2_w"] = rng.normal(0.0, std, size=(ff, d))
        params[p + "ff2_b"] = np.zeros(d)
        params[p + "ln2_g"] = np.ones(d)
        params[p + "ln2_b"] = np.zeros(d)
    params.update(init_head(cfg, rng.integers(0, 2**63 - 1)))
    return params


def _validate_ids(cfg: ModelConfig, ids: np.ndarray, allow_reserved: bool) -> None:
    if ids.ndim != 2:
        raise ShapeError(f"token ids must be 2-d (batch, length), got {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"token ids must be integers, got dtype {ids.dtype}")
    b, t = ids.shape
    if b < 1 or t < 1:
        raise ShapeError(f"empty batch or sequence: {ids.shape}")
    if t > cfg.max_seq_len:
        raise ShapeError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    lo = 0 if allow_reserved else 1
    if ids.min() < lo or ids.max() >= cfg.vocab_size:
        raise ShapeError(
            f"token ids must lie in [{lo}, {cfg.vocab_size}), "
            f"got min {ids.min()} max {ids.max()}"
        )


def _linear(graph: Graph, x: int, w: int, b: int) -> int:
    return graph.apply("broadcast_add", graph.apply("matmul", x, w), b)


def build_encoder(
    graph: Graph,
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    ids: np.ndarray,
    *,
    allow_reserved: bool = False,
) -> tuple[int, dict[str, int]]:
    """Build the encoder stack; returns (final states node (b,T,d), leaf ids).

    Head parameters in `params` are ignored here; `build_forward` adds them.
    """
    ids = np.asarray(ids)
    _validate_ids(cfg, ids, allow_reserved)
    b, t = ids.shape
    with_cls = np.concatenate(
        [np.full((b, 1), CLS_ID, dtype=ids.dtype), ids], axis=1
    )
    seq = t + 1
    d = cfg.d_model
    hd = d // cfg.n_heads
    leaves = {
        name: graph.leaf(value)
        for name, value in params.items()
        if not name.startswith("head.")
    }

    tok = graph.apply("embedding", leaves["embeddings.token"], ids=with_cls)
    pos = graph.apply(
        "embedding", leaves["embeddings.position"], ids=np.arange(seq)
    )
    x = graph.apply("broadcast_add", tok, pos)

    for i in range(1, cfg.n_layers + 1):
        p = f"layer_{i}."
        q = _linear(graph, x, leaves[p + "attn_q_w"], leaves[p + "attn_q_b"])
        k = _linear(graph, x, leaves[p + "attn_k_w"], leaves[p + "attn_k_b"])
        v = _linear(graph, x, leaves[p + "attn_v_w"], leaves[p + "attn_v_b"])
        heads = []
        for node in (q, k, v):
            r = graph.apply("reshape", node, shape=(b, seq, cfg.n_heads, hd))
            heads.append(graph.apply("transpose", r, axes=(0, 2, 1, 3)))
        qh, kh, vh = heads
        # scaling q instead of the score matrix touches 1/seq as many entries
        qh = graph.apply("scale", qh, factor=1.0 / math.sqrt(hd))
        kt = graph.apply("transpose", kh, axes=(0, 1, 3, 2))
        scores = graph.apply("matmul", qh, kt)
        attn = graph.apply("softmax", scores)
        ctx = graph.apply("matmul", attn, vh)
        ctx = graph.apply("transpose", ctx, axes=(0, 2, 1, 3))
        ctx = graph.apply("reshape", ctx, shape=(b, seq, d))
        out = _linear(graph, ctx, leaves[p + "attn_o_w"], leaves[p + "attn_o_b"])
        x = graph.apply("add", x, out)
        x = graph.apply("layernorm", x, leaves[p + "ln1_g"], leaves[p + "ln1_b"])
        h1 = _linear(graph, x, leaves[p + "ff1_w"], leaves[p + "ff1_b"])
        h1 = graph.apply("gelu", h1)
        h2 = _linear(graph, h1, leaves[p + "ff2_w"], leaves[p + "ff2_b"])
        x = graph.apply("add", x, h2)
        x = graph.apply("layernorm", x, leaves[p + "ln2_g"], leaves[p + "ln2_b"])
    return x, leaves


def build_forward(
    graph: Graph,
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    ids: np.ndarray,
    *,
    allow_reserved: bool = False,
) -> tuple[int, dict[str, int]]:
    """Encoder plus classification head read from the [CLS] state."""
    seq, leaves = build_encoder(graph, cfg, params, ids, allow_reserved=allow_reserved)
    cls = graph.apply("select", seq, axis=1, index=0)
    leaves["head.w"] = graph.leaf(params["head.w"])
    leaves["head.b"] = graph.leaf(params["head.b"])
    logits = _linear(graph, cls, leaves["head.w"], leaves["head.b"])
    return logits, leaves


def build_loss(
    graph: Graph,
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    ids: np.ndarray,
    labels: np.ndarray,
    *,
    allow_reserved: bool = False,
) -> tuple[int, int, dict[str, int]]:
    """Mean cross-entropy over the batch; returns (loss, logits, leaves)."""
    logits, leaves = build_forward(
        graph, cfg, params, ids, allow_reserved=allow_reserved
    )
    per_sample = graph.apply("cross_entropy", logits, labels=np.asarray(labels))
    loss = graph.apply("mean", per_sample)
    return loss, logits, leaves


def loss_and_grads(
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    ids: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """One fresh-graph forward/backward; returns (loss, grads by name, logits)."""
    graph = Graph()
    loss, logits, leaves = build_loss(graph, cfg, params, ids, labels)
    node_grads = graph.backward(loss)
    grads = {name: node_grads[nid] for name, nid in leaves.items()}
    return float(graph.value(loss)), grads, graph.value(logits)


def logits_of(cfg: ModelConfig, params: dict[str, np.ndarray], ids: np.ndarray) -> np.ndarray:
    """Forward-only logits for one homogeneous-length batch."""
    graph = Graph()
    logits, _ = build_forward(graph, cfg, params, ids)
    return graph.value(logits)


def cls_embeddings(
    cfg: ModelConfig, params: dict[str, np.ndarray], ids: np.ndarray
) -> np.ndarray:
    """Final-layer [CLS] vectors (batch, d_model), before the head."""
    graph = Graph()
    seq, _ = build_encoder(graph, cfg, params, ids)
    cls = graph.apply("select", seq, axis=1, index=0)
    return graph.value(cls)


def save_params(params: dict[str, np.ndarray], path: str) -> None:
    """Write a checkpoint: one line per parameter, `name shape values`.

    Values are row-major reprs, so loading restores floats bit-exactly.
    Line order follows the dict order and is part of the format.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for name, arr in params.items():
            shape = ",".join(str(s) for s in arr.shape)
            flat = " ".join(repr(float(x)) for x in arr.ravel())
            fh.write(f"{name}\t{shape}\t{flat}\n")


def load_params(path: str) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                name, shape_s, values_s = line.split("\t")
                shape = tuple(int(s) for s in shape_s.split(",") if s)
                values = np.array([float(v) for v in values_s.split(" ")])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad checkpoint line: {exc}") from exc
            params[name] = values.reshape(shape)
    if not params:
        raise ValueError(f"{path}: empty checkpoint")
    return params
