"""Shared fixtures and independent oracles for the test suite.

The finite-difference case registry lives here because both the op-level
unit tests and the acceptance gradient suite iterate over it; each case
closes over its own fixed operands so only the checked input varies.
"""

from __future__ import annotations

import numpy as np
import pytest

from forgetlab.autodiff import Graph, OP_KINDS
from dataclasses import replace

from forgetlab.model import ModelConfig, build_loss, init_params, param_names
from forgetlab.shifts import Dataset, ShiftSpec, TaskPair, make_pair, synth_task


@pytest.fixture
def toy_cfg() -> ModelConfig:
    """Smallest config that still stacks two full encoder layers."""
    return ModelConfig(
        vocab_size=10,
        max_seq_len=6,
        d_model=8,
        n_heads=2,
        n_layers=2,
        d_ff=12,
        n_classes=3,
        seed=7,
    )


@pytest.fixture
def small_cfg() -> ModelConfig:
    """Reduced depth/width but the full vocabulary, for fast training runs."""
    return ModelConfig(d_model=8, n_heads=2, n_layers=2, d_ff=8, seed=11)


def make_small_pair(
    size: int = 60, families: tuple[str, str] = ("A", "B"), seed: int = 3
) -> TaskPair:
    d_o = synth_task(families[0], seed, size=size, name="o-src")
    d_s = synth_task(families[1], seed + 1, size=size, name="s-src")
    spec = ShiftSpec(name="small", kind="dataset-pair", sources=("o-src", "s-src"))
    return make_pair(spec, {"o-src": d_o, "s-src": d_s})


def adjusted_rand_index(a, b) -> float:
    """Pair-counting ARI, computed from the contingency table."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("label vectors must be 1-d and equal length")
    n = len(a)
    cats_a = np.unique(a)
    cats_b = np.unique(b)
    table = np.zeros((len(cats_a), len(cats_b)), dtype=np.int64)
    for i, ca in enumerate(cats_a):
        for j, cb in enumerate(cats_b):
            table[i, j] = int(np.sum((a == ca) & (b == cb)))

    def comb2(x):
        return x * (x - 1) / 2.0

    index = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / comb2(n)
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:
        return 1.0 if index == expected else 0.0
    return float((index - expected) / (maximum - expected))


# ---------------------------------------------------------------------------
# finite-difference case registry: (name, builder) where builder(rng)
# returns (f, point) for finite_difference_check
# ---------------------------------------------------------------------------


def _readout(graph: Graph, node: int, coeffs: np.ndarray) -> int:
    """Fixed linear functional making any tensor output a scalar."""
    return graph.apply("sum", graph.apply("mul", node, graph.leaf(coeffs)))


def _single_input_case(op: str, point_fn, readout_shape=None, **attrs):
    def build(rng):
        point = point_fn(rng)
        coeffs = rng.normal(size=readout_shape if readout_shape else point.shape)

        def f(x):
            g = Graph()
            leaf = g.leaf(x)
            out = g.apply(op, leaf, **attrs)
            s = _readout(g, out, coeffs)
            return float(g.value(s)), g.backward(s)[leaf]

        return f, point

    return build


def _case_matmul_lhs(rng):
    b = rng.normal(size=(4, 2))
    coeffs = rng.normal(size=(3, 2))

    def f(x):
        g = Graph()
        leaf = g.leaf(x)
        s = _readout(g, g.apply("matmul", leaf, g.leaf(b)), coeffs)
        return float(g.value(s)), g.backward(s)[leaf]

    return f, rng.normal(size=(3, 4))


def _case_matmul_rhs(rng):
    a = rng.normal(size=(3, 4))
    coeffs = rng.normal(size=(3, 2))

    def f(x):
        g = Graph()
        leaf = g.leaf(x)
        s = _readout(g, g.apply("matmul", g.leaf(a), leaf), coeffs)
        return float(g.value(s)), g.backward(s)[leaf]

    return f, rng.normal(size=(4, 2))


def _case_matmul_stacked(rng):
    b = rng.normal(size=(2, 4, 3))
    coeffs = rng.normal(size=(2, 3, 3))

    def f(x):
        g = Graph()
        leaf = g.leaf(x)
        s = _readout(g, g.apply("matmul", leaf, g.leaf(b)), coeffs)
        return float(g.value(s)), g.backward(s)[leaf]

    return f, rng.normal(size=(2, 3, 4))


def _case_add(rng):
    b = rng.normal(size=(3, 4))
    coeffs = rng.normal(size=(3, 4))

    def f(x):
        g = Graph()
        leaf = g.leaf(x)
        s = _readout(g, g.apply("add", leaf, g.leaf(b)), coeffs)
        return float(g.value(s)), g.backward(s)[leaf]

    return f, rng.normal(size=(3, 4))


def _case_mul(rng):
    b = rng.normal(size=(3, 4))
    coeffs = rng.normal(size=(3, 4))

    def f(x):
        g = Graph()
        leaf = g.leaf(x)
        s = _readout(g, g.apply("mul", leaf, g.leaf(b)), coeffs)
        return float(g.value(s)), g.backward(s)[leaf]

    return f, rng.normal(size=(3, 4))


def _case_broadcast_add_x(rng):
    bias = rng.normal(size=(4,))
    coeffs = rng.normal(size=(2, 3, 4))

    def f(x):
        g = Graph()
        leaf = g.leaf(x)
        s = _readout(g, g.apply("broadcast_add", leaf, g.leaf(bias)), coeffs)
        return float(g.value(s)), g.backward(s)[leaf]

    return f, rng.normal(size=(2, 3, 4))


def _case_broadcast_add_bias(rng):
    x = rng.normal(size=(2, 3, 4))
    coeffs = rng.normal(size=(2, 3, 4))

    def f(b):
        g = Graph()
        leaf = g.leaf(b)
        s = _readout(g, g.apply("broadcast_add", g.leaf(x), leaf), coeffs)
        return float(g.value(s)), g.backward(s)[leaf]

    return f, rng.normal(size=(4,))


def _case_broadcast_add_matrix_bias(rng):
    x = rng.normal(size=(2, 3, 4))
    coeffs = rng.normal(size=(2, 3, 4))

    def f(b):
        g = Graph()
        leaf = g.leaf(b)
        s = _readout(g, g.apply("broadcast_add", g.leaf(x), leaf), coeffs)
        return float(g.value(s)), g.backward(s)[leaf]

    return f, rng.normal(size=(3, 4))


def _relu_point(rng):
    # keep the probe away from the kink at 0 where central differences lie
    return rng.uniform(0.5, 1.5, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))


def _case_layernorm_x(rng):
    gain = rng.normal(size=(6,))
    shift = rng.normal(size=(6,))
    coeffs = rng.normal(size=(2, 3, 6))

    def f(x):
        g = Graph()
        leaf = g.leaf(x)
        s = _readout(g, g.apply("layernorm", leaf, g.leaf(gain), g.leaf(shift)), coeffs)
        return float(g.value(s)), g.backward(s)[leaf]

    return f, rng.normal(size=(2, 3, 6))


def _case_layernorm_x_spread(rng):
    gain = rng.normal(size=(6,))
    shift = rng.normal(size=(6,))
    coeffs = rng.normal(size=(2, 3, 6))

    def f(x):
        g = Graph()
        leaf = g.leaf(x)
        s = _readout(g, g.apply("layernorm", leaf, g.leaf(gain), g.leaf(shift)), coeffs)
        return float(g.value(s)), g.backward(s)[leaf]

    return f, rng.normal(size=(2, 3, 6)) * 1e3


def _case_layernorm_gain(rng):
    x = rng.normal(size=(2, 3, 6))
    shift = rng.normal(size=(6,))
    coeffs = rng.normal(size=(2, 3, 6))

    def f(gain):
        g = Graph()
        leaf = g.leaf(gain)
        s = _readout(g, g.apply("layernorm", g.leaf(x), leaf, g.leaf(shift)), coeffs)
        return float(g.value(s)), g.backward(s)[leaf]

    return f, rng.normal(size=(6,))


def _case_layernorm_shift(rng):
    x = rng.normal(size=(2, 3, 6))
    gain = rng.normal(size=(6,))
    coeffs = rng.normal(size=(2, 3, 6))

    def f(shift):
        g = Graph()
        leaf = g.leaf(shift)
        s = _readout(g, g.apply("layernorm", g.leaf(x), g.leaf(gain), leaf), coeffs)
        return float(g.value(s)), g.backward(s)[leaf]

    return f, rng.normal(size=(6,))


def _case_embedding(rng):
    ids = rng.integers(0, 7, size=(2, 3))
    coeffs = rng.normal(size=(2, 3, 4))

    def f(table):
        g = Graph()
        leaf = g.leaf(table)
        s = _readout(g, g.apply("embedding", leaf, ids=ids), coeffs)
        return float(g.value(s)), g.backward(s)[leaf]

    return f, rng.normal(size=(7, 4))


def _case_cross_entropy(rng):
    labels = rng.integers(0, 3, size=4)

    def f(logits):
        g = Graph()
        leaf = g.leaf(logits)
        s = g.apply("mean", g.apply("cross_entropy", leaf, labels=labels))
        return float(g.value(s)), g.backward(s)[leaf]

    return f, rng.normal(size=(4, 3))


def _case_mean(rng):
    def f(x):
        g = Graph()
        leaf = g.leaf(x)
        s = g.apply("mean", leaf)
        return float(g.value(s)), g.backward(s)[leaf]

    return f, rng.normal(size=(3, 5))


def _case_sum(rng):
    def f(x):
        g = Graph()
        leaf = g.leaf(x)
        s = g.apply("sum", g.apply("mul", leaf, leaf))
        return float(g.value(s)), g.backward(s)[leaf]

    return f, rng.normal(size=(3, 5))


FD_CASES = [
    ("matmul-lhs", _case_matmul_lhs),
    ("matmul-rhs", _case_matmul_rhs),
    ("matmul-stacked", _case_matmul_stacked),
    ("add", _case_add),
    ("mul", _case_mul),
    ("broadcast_add-x", _case_broadcast_add_x),
    ("broadcast_add-bias", _case_broadcast_add_bias),
    ("broadcast_add-matrix-bias", _case_broadcast_add_matrix_bias),
    ("relu", _single_input_case("relu", _relu_point)),
    ("gelu", _single_input_case("gelu", lambda rng: rng.normal(size=(3, 4)))),
    (
        "softmax",
        _single_input_case("softmax", lambda rng: rng.normal(size=(3, 5))),
    ),
    ("layernorm-x", _case_layernorm_x),
    ("layernorm-x-spread", _case_layernorm_x_spread),
    ("layernorm-gain", _case_layernorm_gain),
    ("layernorm-shift", _case_layernorm_shift),
    ("embedding", _case_embedding),
    ("mean", _case_mean),
    ("sum", _case_sum),
    ("cross_entropy", _case_cross_entropy),
    (
        "reshape",
        _single_input_case(
            "reshape", lambda rng: rng.normal(size=(3, 4)),
            readout_shape=(2, 6), shape=(2, 6),
        ),
    ),
    (
        "transpose",
        _single_input_case(
            "transpose", lambda rng: rng.normal(size=(3, 4)),
            readout_shape=(4, 3), axes=(1, 0),
        ),
    ),
    (
        "select",
        _single_input_case(
            "select", lambda rng: rng.normal(size=(3, 4)),
            readout_shape=(4,), axis=0, index=1,
        ),
    ),
    (
        "scale",
        _single_input_case(
            "scale", lambda rng: rng.normal(size=(3, 4)), factor=-2.5,
        ),
    ),
]


def fd_case_op_names() -> set[str]:
    """Op kinds exercised by FD_CASES (case name up to the first dash)."""
    return {name.split("-")[0] for name, _ in FD_CASES}


assert fd_case_op_names() == set(OP_KINDS), "FD registry must cover every op kind"


def model_loss_fd_fn(cfg: ModelConfig, seed: int):
    """(f, point) treating every model parameter as one flat vector.

    `f` rebuilds the classification loss on a fixed random batch, so
    finite_difference_check probes the gradient of the entire network.
    """
    rng = np.random.default_rng(seed)
    base = init_params(replace(cfg, seed=seed))
    # biases and gains start at exact 0/1; jitter so no probe sits on a kink
    for name in base:
        base[name] = base[name] + rng.normal(0.0, 0.05, size=base[name].shape)
    names = param_names(cfg)
    shapes = [base[n].shape for n in names]
    sizes = [base[n].size for n in names]
    ids = rng.integers(1, cfg.vocab_size, size=(3, cfg.max_seq_len - 2))
    labels = rng.integers(0, cfg.n_classes, size=3)

    def f(flat):
        params = {}
        offset = 0
        for name, shape, size in zip(names, shapes, sizes):
            params[name] = flat[offset : offset + size].reshape(shape)
            offset += size
        g = Graph()
        loss, _, leaves = build_loss(g, cfg, params, ids, labels)
        grads = g.backward(loss)
        flat_grad = np.concatenate(
            [grads[leaves[name]].ravel() for name in names]
        )
        return float(g.value(loss)), flat_grad

    point = np.concatenate([base[n].ravel() for n in names])
    return f, point


def balanced_binary(name: str, n: int, length: int = 9) -> Dataset:
    """Tiny fixed dataset with an exactly even label split."""
    rng = np.random.default_rng(17)
    examples = []
    for i in range(n):
        seq = tuple(int(t) for t in rng.integers(1, 64, size=length))
        examples.append((seq, i % 2))
    return Dataset(name=name, examples=tuple(examples), n_classes=2)
