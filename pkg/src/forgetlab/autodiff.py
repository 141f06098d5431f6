"""Reverse-mode automatic differentiation over dense float64 tensors.

A Graph records define-by-run computations as an append-only node list:
every `apply` call evaluates its op immediately and stores the result, so
node ids are already in topological order and `backward` is a single
reverse sweep. Graphs are rebuilt per batch and never reused.

Supported ops: matmul, add, mul, broadcast_add, relu, gelu, softmax,
layernorm, embedding, mean, sum, cross_entropy, reshape, transpose,
select, scale. Shapes are validated on entry and every output is checked
finite; training code relies on `NumericOverflowError` to detect diverged
runs.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray

GELU_CUBIC_COEFF = 0.044715
GELU_SQRT_2_OVER_PI = 0.7978845608028654  # sqrt(2/pi)
LAYERNORM_EPS = 1e-5


_MOVEMENT_OPS = frozenset({"reshape", "transpose", "select", "embedding"})


class ShapeError(ValueError):
    """Operand shapes do not conform to the op's shape rule."""


class NumericOverflowError(FloatingPointError):
    """An op produced a non-finite value (training has diverged)."""


class Node:
    __slots__ = ("op", "inputs", "value", "ctx")

    def __init__(self, op: str, inputs: tuple[int, ...], value: Array, ctx):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.ctx = ctx

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Node(op={self.op!r}, inputs={self.inputs}, shape={self.value.shape})"


def _as_f64(value) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Graph:
    """Append-only computation record; node ids index into `nodes`."""

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, nid: int) -> Array:
        return self.nodes[nid].value

    def leaf(self, value) -> int:
        """Insert an input tensor (parameter or constant)."""
        arr = _as_f64(value)
        if not np.isfinite(arr).all():
            raise NumericOverflowError("leaf value contains non-finite entries")
        self.nodes.append(Node("leaf", (), arr, None))
        return len(self.nodes) - 1

    def apply(self, op: str, *operands: int, **attrs) -> int:
        """Evaluate `op` on operand node ids, append the result node."""
        forward = _FORWARD.get(op)
        if forward is None:
            raise ValueError(f"unknown op kind {op!r}")
        for nid in operands:
            if not 0 <= nid < len(self.nodes):
                raise ValueError(f"operand id {nid} not in graph (op {op!r})")
        values = tuple(self.nodes[nid].value for nid in operands)
        out, ctx = forward(values, attrs)
        nid = len(self.nodes)
        # movement ops only rearrange entries that were already checked
        if op not in _MOVEMENT_OPS and not np.isfinite(out).all():
            raise NumericOverflowError(f"non-finite output at node {nid} (op {op!r})")
        self.nodes.append(Node(op, operands, out, ctx))
        return nid

    def backward(self, loss: int) -> dict[int, Array]:
        """Gradients of the scalar node `loss` w.r.t. every node.

        Returns a map node id -> gradient array. Leaves that do not
        influence the loss get explicit zero gradients.
        """
        if not 0 <= loss < len(self.nodes):
            raise ValueError(f"loss id {loss} not in graph")
        loss_node = self.nodes[loss]
        if loss_node.value.size != 1:
            raise ShapeError(
                f"loss node must be scalar, got shape {loss_node.value.shape}"
            )
        grads: list[Array | None] = [None] * len(self.nodes)
        grads[loss] = np.ones_like(loss_node.value)
        for nid in range(loss, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.op == "leaf":
                continue
            values = tuple(self.nodes[i].value for i in node.inputs)
            for iid, ig in zip(node.inputs, _BACKWARD[node.op](g, node, values)):
                if ig is None:
                    continue
                if grads[iid] is None:
                    grads[iid] = ig
                else:
                    grads[iid] = grads[iid] + ig
        out: dict[int, Array] = {}
        for nid, g in enumerate(grads):
            if g is not None:
                out[nid] = g
            elif self.nodes[nid].op == "leaf":
                out[nid] = np.zeros_like(self.nodes[nid].value)
        return out


# ---------------------------------------------------------------------------
# forward rules: (values, attrs) -> (output, ctx)
# ---------------------------------------------------------------------------


def _need(values, n, op):
    if len(values) != n:
        raise ShapeError(f"{op} takes {n} operand(s), got {len(values)}")


def _fwd_matmul(values, attrs):
    _need(values, 2, "matmul")
    a, b = values
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if b.ndim == 2:
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    elif a.ndim == b.ndim:
        if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shapes do not conform: {a.shape} @ {b.shape}")
    else:
        raise ShapeError(
            f"matmul supports stacked @ stacked or stacked @ 2-d, got {a.shape} @ {b.shape}"
        )
    return np.matmul(a, b), None


def _fwd_add(values, attrs):
    _need(values, 2, "add")
    a, b = values
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    return a + b, None


def _fwd_mul(values, attrs):
    _need(values, 2, "mul")
    a, b = values
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    return a * b, None


def _fwd_broadcast_add(values, attrs):
    _need(values, 2, "broadcast_add")
    x, b = values
    if b.ndim >= x.ndim or x.shape[x.ndim - b.ndim :] != b.shape:
        raise ShapeError(
            f"broadcast_add needs bias shape equal to a trailing suffix of {x.shape}, got {b.shape}"
        )
    return x + b, None


def _fwd_relu(values, attrs):
    _need(values, 1, "relu")
    (x,) = values
    return np.maximum(x, 0.0), None


def _fwd_gelu(values, attrs):
    _need(values, 1, "gelu")
    (x,) = values
    # tanh(sqrt(2/pi) * (x + 0.044715 x^3)), built in place
    t = x * x
    t *= GELU_CUBIC_COEFF
    t += 1.0
    t *= x
    t *= GELU_SQRT_2_OVER_PI
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5
    return out, t


def _fwd_softmax(values, attrs):
    _need(values, 1, "softmax")
    (x,) = values
    if x.ndim < 1:
        raise ShapeError("softmax needs at least 1 axis")
    e = x - x.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e, None


def _fwd_layernorm(values, attrs):
    _need(values, 3, "layernorm")
    x, gain, shift = values
    if x.ndim < 1:
        raise ShapeError("layernorm needs at least 1 axis")
    n = x.shape[-1]
    if gain.shape != (n,) or shift.shape != (n,):
        raise ShapeError(
            f"layernorm gain/shift must have shape ({n},), got {gain.shape} and {shift.shape}"
        )
    xhat = x - x.mean(axis=-1, keepdims=True)
    var = np.mean(xhat * xhat, axis=-1, keepdims=True)
    var += LAYERNORM_EPS
    np.sqrt(var, out=var)
    inv = np.divide(1.0, var, out=var)
    xhat *= inv
    out = xhat * gain
    out += shift
    return out, (xhat, inv)


def _fwd_embedding(values, attrs):
    _need(values, 1, "embedding")
    (table,) = values
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-d, got {table.shape}")
    ids = np.asarray(attrs["ids"])
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding id out of range [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}"
        )
    return table[ids], ids


def _fwd_mean(values, attrs):
    _need(values, 1, "mean")
    (x,) = values
    return np.asarray(x.mean()), None


def _fwd_sum(values, attrs):
    _need(values, 1, "sum")
    (x,) = values
    return np.asarray(x.sum()), None


def _fwd_cross_entropy(values, attrs):
    _need(values, 1, "cross_entropy")
    (logits,) = values
    labels = np.asarray(attrs["labels"])
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy logits must be 2-d, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy labels must have shape ({logits.shape[0]},), got {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"cross_entropy label out of range [0, {logits.shape[1]})")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(logits.shape[0])
    losses = -logp[rows, labels]
    return losses, (np.exp(logp), labels)


def _fwd_reshape(values, attrs):
    _need(values, 1, "reshape")
    (x,) = values
    shape = tuple(attrs["shape"])
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    return x.reshape(shape), None


def _fwd_transpose(values, attrs):
    _need(values, 1, "transpose")
    (x,) = values
    axes = tuple(attrs["axes"])
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} are not a permutation for {x.shape}")
    return x.transpose(axes), axes


def _fwd_select(values, attrs):
    _need(values, 1, "select")
    (x,) = values
    axis, index = attrs["axis"], attrs["index"]
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"select axis {axis} invalid for shape {x.shape}")
    if not 0 <= index < x.shape[axis]:
        raise ShapeError(f"select index {index} out of range for axis {axis} of {x.shape}")
    return np.take(x, index, axis=axis), (axis, index)


def _fwd_scale(values, attrs):
    _need(values, 1, "scale")
    (x,) = values
    return float(attrs["factor"]) * x, float(attrs["factor"])


_FORWARD = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "mul": _fwd_mul,
    "broadcast_add": _fwd_broadcast_add,
    "relu": _fwd_relu,
    "gelu": _fwd_gelu,
    "softmax": _fwd_softmax,
    "layernorm": _fwd_layernorm,
    "embedding": _fwd_embedding,
    "mean": _fwd_mean,
    "sum": _fwd_sum,
    "cross_entropy": _fwd_cross_entropy,
    "reshape": _fwd_reshape,
    "transpose": _fwd_transpose,
    "select": _fwd_select,
    "scale": _fwd_scale,
}


# ---------------------------------------------------------------------------
# backward rules: (upstream grad, node, input values) -> grads per input
# ---------------------------------------------------------------------------


def _bwd_matmul(g, node, values):
    a, b = values
    if b.ndim == 2:
        da = np.matmul(g, b.T)
        db = np.matmul(a.reshape(-1, a.shape[-1]).T, g.reshape(-1, g.shape[-1]))
    else:
        da = np.matmul(g, b.swapaxes(-1, -2))
        db = np.matmul(a.swapaxes(-1, -2), g)
    return da, db


def _bwd_add(g, node, values):
    return g, g


def _bwd_mul(g, node, values):
    a, b = values
    return g * b, g * a


def _bwd_broadcast_add(g, node, values):
    x, b = values
    lead = tuple(range(x.ndim - b.ndim))
    return g, g.sum(axis=lead)


def _bwd_relu(g, node, values):
    (x,) = values
    return (g * (x > 0),)


def _bwd_gelu(g, node, values):
    (x,) = values
    t = node.ctx
    # dx = 0.5 [ (1+t) + x (1-t^2) * d(inner)/dx ], built in place
    dx = x * x
    dx *= 3.0 * GELU_CUBIC_COEFF
    dx += 1.0
    dx *= GELU_SQRT_2_OVER_PI
    sech2 = t * t
    np.subtract(1.0, sech2, out=sech2)
    dx *= sech2
    dx *= x
    dx += 1.0
    dx += t
    dx *= 0.5
    dx *= g
    return (dx,)


def _bwd_softmax(g, node, values):
    y = node.value
    gy = g * y
    dx = g - gy.sum(axis=-1, keepdims=True)
    dx *= y
    return (dx,)


def _bwd_layernorm(g, node, values):
    x, gain, shift = values
    xhat, inv = node.ctx
    lead = tuple(range(x.ndim - 1))
    gx = g * xhat
    dgain = gx.sum(axis=lead)
    dshift = g.sum(axis=lead)
    dx = g * gain
    proj = (dx * xhat).mean(axis=-1, keepdims=True)
    dx -= dx.mean(axis=-1, keepdims=True)
    np.multiply(xhat, proj, out=gx)
    dx -= gx
    dx *= inv
    return dx, dgain, dshift


def _bwd_embedding(g, node, values):
    (table,) = values
    ids = node.ctx
    dtable = np.zeros_like(table)
    np.add.at(dtable, ids, g)
    return (dtable,)


def _bwd_mean(g, node, values):
    (x,) = values
    return (np.full_like(x, float(g) / x.size),)


def _bwd_sum(g, node, values):
    (x,) = values
    return (np.full_like(x, float(g)),)


def _bwd_cross_entropy(g, node, values):
    probs, labels = node.ctx
    d = probs * g[:, None]
    d[np.arange(d.shape[0]), labels] -= g
    return (d,)


def _bwd_reshape(g, node, values):
    (x,) = values
    return (g.reshape(x.shape),)


def _bwd_transpose(g, node, values):
    axes = node.ctx
    return (g.transpose(np.argsort(axes)),)


def _bwd_select(g, node, values):
    (x,) = values
    axis, index = node.ctx
    dx = np.zeros_like(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = index
    dx[tuple(sl)] = g
    return (dx,)


def _bwd_scale(g, node, values):
    return (node.ctx * g,)


_BACKWARD = {
    "matmul": _bwd_matmul,
    "add": _bwd_add,
    "mul": _bwd_mul,
    "broadcast_add": _bwd_broadcast_add,
    "relu": _bwd_relu,
    "gelu": _bwd_gelu,
    "softmax": _bwd_softmax,
    "layernorm": _bwd_layernorm,
    "embedding": _bwd_embedding,
    "mean": _bwd_mean,
    "sum": _bwd_sum,
    "cross_entropy": _bwd_cross_entropy,
    "reshape": _bwd_reshape,
    "transpose": _bwd_transpose,
    "select": _bwd_select,
    "scale": _bwd_scale,
}

OP_KINDS = tuple(sorted(_FORWARD))


def finite_difference_check(f, point, h: float = 1e-5) -> float:
    """Max relative error between f's analytic gradient and central differences.

    `f` maps a float64 array to `(scalar_value, gradient_array)`. The
    numeric side uses only the scalar, so the comparison is independent of
    the backward implementation under test. Errors are relative with a
    unit floor: |analytic - numeric| / max(1, |analytic|). Any non-finite
    intermediate is reported as an infinite error.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    # private contiguous copy so ravel() below is a mutable view
    point = _as_f64(point).copy()
    try:
        _, grad = f(point)
    except NumericOverflowError:
        return np.inf
    grad = _as_f64(grad).ravel()
    if grad.shape != (point.size,):
        raise ShapeError(
            f"gradient shape {grad.shape} does not match point size {point.size}"
        )
    worst = 0.0
    flat = point.ravel()
    for i in range(point.size):
        orig = flat[i]
        try:
            flat[i] = orig + h
            up, _ = f(point)
            flat[i] = orig - h
            down, _ = f(point)
        except NumericOverflowError:
            return np.inf
        finally:
            flat[i] = orig
        numeric = (float(up) - float(down)) / (2.0 * h)
        if not np.isfinite(numeric):
            return np.inf
        err = abs(grad[i] - numeric) / max(1.0, abs(grad[i]))
        if err > worst:
            worst = err
    return worst
