"""
Minimal dense tensor engine with reverse-mode differentiation.

Every forward primitive is applied through `apply`, which records the application
on a `Tape` when any input requires a gradient. `backward` walks the tape in
reverse recording order and accumulates gradients additively, so a tensor that
feeds several consumers receives the sum of their contributions.

All data is float64. Broadcasting is limited to numpy's size-1 rules for `add`
and `mul` (bias-add, causal-mask add, gating) and to leading batch axes for `matmul`.
"""

import enum
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.special import expit, log_softmax, softmax

from src.constants import FINITE_DIFF_STEP, LAYERNORM_EPS, RELU_KINK_MARGIN
from src.errors import (
    ConformanceError,
    InvalidRootError,
    InvalidShapeError,
    ParameterError,
)


class PrimitiveKind(str, enum.Enum):
    MATMUL = "matmul"
    ADD = "add"
    SCALAR_MUL = "scalar_mul"
    MUL = "mul"
    RELU = "relu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    SOFTMAX = "softmax"
    LAYERNORM = "layernorm"
    EMBEDDING = "embedding"
    DROPOUT = "dropout"
    CROSS_ENTROPY = "cross_entropy"
    CONCAT = "concat"
    SLICE = "slice"
    TRANSPOSE = "transpose"
    RESHAPE = "reshape"
    SUM = "sum"


class Tensor:
    """
    Dense float64 array with a requires_grad flag.

    Tensors hash by identity so they can key gradient tables.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class Node:
    kind: PrimitiveKind
    inputs: tuple
    output: Tensor
    ctx: dict
    attrs: dict


@dataclass
class Tape:
    nodes: List[Node] = field(default_factory=list)

    def record(self, node: Node):
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)


@dataclass(frozen=True)
class RandomFill:
    """Seeded random fill spec for `tensor_create`."""

    seed: int
    low: float = -1.0
    high: float = 1.0
    distribution: str = "uniform"


def tensor_create(
    shape: Sequence[int],
    fill: Union[float, RandomFill] = 0.0,
    requires_grad: bool = False,
    name: Optional[str] = None,
) -> Tensor:
    """
    Create a tensor of the given shape filled with a constant or seeded random values.

    Identical (shape, fill) pairs yield bit-identical data.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise InvalidShapeError(f"shape extents must be >= 1, got {list(shape)}")
    if isinstance(fill, RandomFill):
        rng = np.random.default_rng(fill.seed)
        if fill.distribution == "uniform":
            data = rng.uniform(fill.low, fill.high, size=shape)
        elif fill.distribution == "normal":
            data = rng.standard_normal(size=shape)
        else:
            raise ParameterError(f"unknown random distribution {fill.distribution}")
    else:
        data = np.full(shape, float(fill), dtype=np.float64)
    return Tensor(data, requires_grad=requires_grad, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce grad over the axes that were broadcast to reach it from shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: np.ndarray, b: np.ndarray, kind: PrimitiveKind) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConformanceError(f"{kind.value}: shapes {a.shape} and {b.shape} do not conform")


### forward / backward rules
# forward(*arrays, **attrs) -> (out, ctx); backward(g, ctx, arrays, attrs) -> per-input grads


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConformanceError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ConformanceError(f"matmul: batch axes {a.shape} and {b.shape} do not conform")
    return np.matmul(a, b), {}


def _matmul_bwd(g, ctx, arrays, attrs):
    a, b = arrays
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    if b.ndim == 2 and a.ndim > 2:
        # shared weight: fold the leading axes into one contraction
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
    return [_unbroadcast(ga, a.shape), gb]


def _add_fwd(a, b):
    _broadcast_shape(a, b, PrimitiveKind.ADD)
    return a + b, {}


def _add_bwd(g, ctx, arrays, attrs):
    a, b = arrays
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _scalar_mul_fwd(a, scalar):
    return a * float(scalar), {}


def _scalar_mul_bwd(g, ctx, arrays, attrs):
    return [g * float(attrs["scalar"])]


def _mul_fwd(a, b):
    _broadcast_shape(a, b, PrimitiveKind.MUL)
    return a * b, {}


def _mul_bwd(g, ctx, arrays, attrs):
    a, b = arrays
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _relu_fwd(a):
    # subgradient 0 at exactly 0
    mask = a > 0
    return np.where(mask, a, 0.0), {"mask": mask}


def _relu_bwd(g, ctx, arrays, attrs):
    return [g * ctx["mask"]]


def _sigmoid_fwd(a):
    out = expit(a)
    return out, {"out": out}


def _sigmoid_bwd(g, ctx, arrays, attrs):
    out = ctx["out"]
    return [g * out * (1.0 - out)]


def _tanh_fwd(a):
    out = np.tanh(a)
    return out, {"out": out}


def _tanh_bwd(g, ctx, arrays, attrs):
    out = ctx["out"]
    return [g * (1.0 - out * out)]


def _softmax_fwd(a):
    # scipy subtracts the row max before exponentiating
    out = softmax(a, axis=-1)
    return out, {"out": out}


def _softmax_bwd(g, ctx, arrays, attrs):
    out = ctx["out"]
    return [out * (g - np.sum(g * out, axis=-1, keepdims=True))]


def _layernorm_fwd(x, gamma, beta, eps=LAYERNORM_EPS):
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ConformanceError(
            f"layernorm: gain {gamma.shape} / shift {beta.shape} do not match last axis of {x.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, {"xhat": xhat, "inv": inv}


def _layernorm_bwd(g, ctx, arrays, attrs):
    x, gamma, beta = arrays
    xhat, inv = ctx["xhat"], ctx["inv"]
    reduce_axes = tuple(range(x.ndim - 1))
    g_beta = g.sum(axis=reduce_axes)
    g_gamma = (g * xhat).sum(axis=reduce_axes)
    g_xhat = g * gamma
    g_x = inv * (
        g_xhat
        - g_xhat.mean(axis=-1, keepdims=True)
        - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True)
    )
    return [g_x, g_gamma, g_beta]


def _embedding_fwd(table, indices):
    indices = np.asarray(indices)
    if table.ndim != 2:
        raise ConformanceError(f"embedding: table must be 2-d, got {table.shape}")
    if not np.issubdtype(indices.dtype, np.integer):
        raise ConformanceError("embedding: indices must be integers")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ConformanceError(
            f"embedding: indices outside [0, {table.shape[0]}) for table {table.shape}"
        )
    return table[indices], {}


def _embedding_bwd(g, ctx, arrays, attrs):
    (table,) = arrays
    g_table = np.zeros_like(table)
    np.add.at(g_table, np.asarray(attrs["indices"]), g)
    return [g_table]


def _dropout_fwd(a, rate, train, rng=None):
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a.copy(), {"mask": None}
    if rng is None:
        raise ParameterError("dropout in train mode needs a seeded generator")
    keep = rng.random(a.shape) >= rate
    return a * keep / (1.0 - rate), {"mask": keep, "scale": 1.0 - rate}


def _dropout_bwd(g, ctx, arrays, attrs):
    mask = ctx["mask"]
    return [g if mask is None else g * mask / ctx["scale"]]


def _cross_entropy_fwd(logits, targets):
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ConformanceError(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}"
        )
    logp = log_softmax(logits, axis=-1)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    return np.asarray(-picked.mean()), {"logp": logp, "count": targets.size}


def _cross_entropy_bwd(g, ctx, arrays, attrs):
    targets = np.asarray(attrs["targets"])
    probs = np.exp(ctx["logp"])
    np.put_along_axis(
        probs,
        targets[..., None],
        np.take_along_axis(probs, targets[..., None], axis=-1) - 1.0,
        axis=-1,
    )
    return [g * probs / ctx["count"]]


def _concat_fwd(*arrays, axis=0):
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as e:
        raise ConformanceError(f"concat: {e}")
    return out, {"sizes": [a.shape[axis] for a in arrays]}


def _concat_bwd(g, ctx, arrays, attrs):
    splits = np.cumsum(ctx["sizes"])[:-1]
    return list(np.split(g, splits, axis=attrs.get("axis", 0)))


def _slice_fwd(a, key):
    try:
        out = a[key]
    except IndexError as e:
        raise ConformanceError(f"slice: {e}")
    return np.array(out), {}


def _slice_bwd(g, ctx, arrays, attrs):
    (a,) = arrays
    g_a = np.zeros_like(a)
    g_a[attrs["key"]] = g
    return [g_a]


def _transpose_fwd(a, axes=None):
    if axes is not None and sorted(axes) != list(range(a.ndim)):
        raise ConformanceError(f"transpose: axes {axes} invalid for {a.ndim}-d tensor")
    return np.transpose(a, axes), {}


def _transpose_bwd(g, ctx, arrays, attrs):
    axes = attrs.get("axes")
    if axes is None:
        return [np.transpose(g)]
    return [np.transpose(g, np.argsort(axes))]


def _reshape_fwd(a, shape):
    try:
        return a.reshape(shape), {}
    except ValueError as e:
        raise ConformanceError(f"reshape: {e}")


def _reshape_bwd(g, ctx, arrays, attrs):
    (a,) = arrays
    return [g.reshape(a.shape)]


def _sum_fwd(a, axis):
    if not -a.ndim <= axis < a.ndim:
        raise ConformanceError(f"sum: axis {axis} invalid for {a.ndim}-d tensor")
    return a.sum(axis=axis), {}


def _sum_bwd(g, ctx, arrays, attrs):
    (a,) = arrays
    return [np.broadcast_to(np.expand_dims(g, attrs["axis"]), a.shape).copy()]


_RULES: Dict[PrimitiveKind, tuple] = {
    PrimitiveKind.MATMUL: (_matmul_fwd, _matmul_bwd),
    PrimitiveKind.ADD: (_add_fwd, _add_bwd),
    PrimitiveKind.SCALAR_MUL: (_scalar_mul_fwd, _scalar_mul_bwd),
    PrimitiveKind.MUL: (_mul_fwd, _mul_bwd),
    PrimitiveKind.RELU: (_relu_fwd, _relu_bwd),
    PrimitiveKind.SIGMOID: (_sigmoid_fwd, _sigmoid_bwd),
    PrimitiveKind.TANH: (_tanh_fwd, _tanh_bwd),
    PrimitiveKind.SOFTMAX: (_softmax_fwd, _softmax_bwd),
    PrimitiveKind.LAYERNORM: (_layernorm_fwd, _layernorm_bwd),
    PrimitiveKind.EMBEDDING: (_embedding_fwd, _embedding_bwd),
    PrimitiveKind.DROPOUT: (_dropout_fwd, _dropout_bwd),
    PrimitiveKind.CROSS_ENTROPY: (_cross_entropy_fwd, _cross_entropy_bwd),
    PrimitiveKind.CONCAT: (_concat_fwd, _concat_bwd),
    PrimitiveKind.SLICE: (_slice_fwd, _slice_bwd),
    PrimitiveKind.TRANSPOSE: (_transpose_fwd, _transpose_bwd),
    PrimitiveKind.RESHAPE: (_reshape_fwd, _reshape_bwd),
    PrimitiveKind.SUM: (_sum_fwd, _sum_bwd),
}


def apply(
    kind: PrimitiveKind,
    inputs: Sequence[Tensor],
    tape: Optional[Tape] = None,
    **attrs,
) -> Tensor:
    """
    Apply a primitive to its tensor inputs.

    Non-differentiable arguments (embedding indices, cross-entropy targets, dropout
    rate and generator, slice keys, axes) are passed as keyword attributes.
    The application is recorded on `tape` when any input requires a gradient.
    """
    forward, _ = _RULES[PrimitiveKind(kind)]
    out_data, ctx = forward(*[t.data for t in inputs], **attrs)
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires_grad)
    if tape is not None and requires_grad:
        tape.record(Node(PrimitiveKind(kind), tuple(inputs), out, ctx, attrs))
    return out


def backward(loss: Tensor, tape: Tape) -> Dict[Tensor, np.ndarray]:
    """
    Reverse-mode pass over `tape` starting from the scalar `loss`.

    Returns
    ----------
    grads: dict
        gradient array for every requires_grad leaf reached from loss
    """
    if loss.data.shape != ():
        raise InvalidRootError(f"backward needs a scalar root, got shape {loss.shape}")
    produced = {id(node.output) for node in tape.nodes}
    if id(loss) not in produced:
        raise InvalidRootError("backward root was not produced through the tape")

    grads = {id(loss): np.ones((), dtype=np.float64)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        _, rule = _RULES[node.kind]
        input_grads = rule(g, node.ctx, [t.data for t in node.inputs], node.attrs)
        for t, g_in in zip(node.inputs, input_grads):
            if g_in is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + g_in if key in grads else np.array(g_in, dtype=np.float64)
            if key not in produced:
                leaves[key] = t
    return {t: grads[key] for key, t in leaves.items()}


### convenience wrappers used by the model zoo


def matmul(a, b, tape=None):
    return apply(PrimitiveKind.MATMUL, [a, b], tape)


def add(a, b, tape=None):
    return apply(PrimitiveKind.ADD, [a, b], tape)


def scalar_mul(a, scalar, tape=None):
    return apply(PrimitiveKind.SCALAR_MUL, [a], tape, scalar=scalar)


def mul(a, b, tape=None):
    return apply(PrimitiveKind.MUL, [a, b], tape)


def relu(a, tape=None):
    return apply(PrimitiveKind.RELU, [a], tape)


def sigmoid(a, tape=None):
    return apply(PrimitiveKind.SIGMOID, [a], tape)


def tanh(a, tape=None):
    return apply(PrimitiveKind.TANH, [a], tape)


def softmax_last(a, tape=None):
    return apply(PrimitiveKind.SOFTMAX, [a], tape)


def layernorm(x, gamma, beta, tape=None):
    return apply(PrimitiveKind.LAYERNORM, [x, gamma, beta], tape)


def embedding(table, indices, tape=None):
    return apply(PrimitiveKind.EMBEDDING, [table], tape, indices=np.asarray(indices))


def dropout(a, rate, train, rng=None, tape=None):
    return apply(PrimitiveKind.DROPOUT, [a], tape, rate=rate, train=train, rng=rng)


def cross_entropy(logits, targets, tape=None):
    return apply(PrimitiveKind.CROSS_ENTROPY, [logits], tape, targets=np.asarray(targets))


def concat(tensors, axis=0, tape=None):
    return apply(PrimitiveKind.CONCAT, list(tensors), tape, axis=axis)


def slice_(a, key, tape=None):
    return apply(PrimitiveKind.SLICE, [a], tape, key=key)


def transpose(a, axes=None, tape=None):
    return apply(PrimitiveKind.TRANSPOSE, [a], tape, axes=axes)


def reshape(a, shape, tape=None):
    return apply(PrimitiveKind.RESHAPE, [a], tape, shape=tuple(shape))


def sum_axis(a, axis, tape=None):
    return apply(PrimitiveKind.SUM, [a], tape, axis=axis)


### gradient verification


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error between two gradient arrays."""
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_gradient(
    loss_fn: Callable[[], float],
    tensor: Tensor,
    coords: Optional[Sequence[tuple]] = None,
    step: float = FINITE_DIFF_STEP,
) -> np.ndarray:
    """
    Central finite differences of loss_fn with respect to entries of tensor.data.

    When coords is given only those entries are perturbed and a flat array in
    coords order is returned; otherwise the full gradient array is returned.
    """
    full = coords is None
    if full:
        coords = list(np.ndindex(*tensor.shape))
    out = np.zeros(len(coords))
    for i, c in enumerate(coords):
        original = tensor.data[c]
        tensor.data[c] = original + step
        plus = loss_fn()
        tensor.data[c] = original - step
        minus = loss_fn()
        tensor.data[c] = original
        out[i] = (plus - minus) / (2.0 * step)
    return out.reshape(tensor.shape) if full else out


def _grad_check_case(kind: PrimitiveKind, rng: np.random.Generator):
    """Random inputs (as leaf tensors) and an attrs factory for one trial of `kind`."""
    u = lambda *shape: rng.uniform(-1.0, 1.0, size=shape)
    attrs = lambda: {}
    if kind is PrimitiveKind.MATMUL:
        arrays = [u(2, 3, 4), u(4, 5)]
    elif kind in (PrimitiveKind.ADD, PrimitiveKind.MUL):
        arrays = [u(3, 4), u(1, 4)]
    elif kind is PrimitiveKind.SCALAR_MUL:
        arrays = [u(3, 4)]
        scalar = float(rng.uniform(-2.0, 2.0))
        attrs = lambda: {"scalar": scalar}
    elif kind is PrimitiveKind.RELU:
        x = u(3, 4)
        arrays = [np.sign(x) * (RELU_KINK_MARGIN + np.abs(x))]
    elif kind in (PrimitiveKind.SIGMOID, PrimitiveKind.TANH, PrimitiveKind.SOFTMAX):
        arrays = [2.0 * u(3, 5)]
    elif kind is PrimitiveKind.LAYERNORM:
        arrays = [u(3, 6), 1.0 + 0.5 * u(6), 0.5 * u(6)]
    elif kind is PrimitiveKind.EMBEDDING:
        arrays = [u(5, 3)]
        indices = rng.integers(0, 5, size=(2, 4))
        attrs = lambda: {"indices": indices}
    elif kind is PrimitiveKind.DROPOUT:
        arrays = [u(4, 5)]
        mask_seed = int(rng.integers(0, 2**31))
        attrs = lambda: {"rate": 0.3, "train": True, "rng": np.random.default_rng(mask_seed)}
    elif kind is PrimitiveKind.CROSS_ENTROPY:
        arrays = [2.0 * u(2, 3, 5)]
        targets = rng.integers(0, 5, size=(2, 3))
        attrs = lambda: {"targets": targets}
    elif kind is PrimitiveKind.CONCAT:
        arrays = [u(2, 3), u(2, 2)]
        attrs = lambda: {"axis": 1}
    elif kind is PrimitiveKind.SLICE:
        arrays = [u(4, 5)]
        attrs = lambda: {"key": (slice(1, 3), slice(0, 4, 2))}
    elif kind is PrimitiveKind.TRANSPOSE:
        arrays = [u(2, 3, 4)]
        attrs = lambda: {"axes": (2, 0, 1)}
    elif kind is PrimitiveKind.RESHAPE:
        arrays = [u(2, 6)]
        attrs = lambda: {"shape": (3, 4)}
    elif kind is PrimitiveKind.SUM:
        arrays = [u(2, 3, 4)]
        attrs = lambda: {"axis": 1}
    else:
        raise ParameterError(f"no gradient check case for {kind}")
    return [Tensor(a, requires_grad=True) for a in arrays], attrs


def grad_check(kind: Union[PrimitiveKind, str], trial_count: int, seed: int) -> float:
    """
    Compare the analytic gradient of `kind` with central finite differences.

    Each trial draws seeded random inputs, reduces the primitive output to a scalar
    with a fixed random weighting, and compares gradients for every input.

    Returns
    ----------
    max_rel_err: float
        worst norm-wise relative error over all trials and inputs
    """
    if trial_count < 1:
        raise ParameterError(f"trial_count must be >= 1, got {trial_count}")
    kind = PrimitiveKind(kind)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trial_count):
        inputs, attrs = _grad_check_case(kind, rng)
        probe = apply(kind, inputs, None, **attrs())
        weights = Tensor(rng.uniform(-1.0, 1.0, size=probe.shape))

        def scalar_loss(tape=None):
            out = apply(kind, inputs, tape, **attrs())
            if out.data.ndim == 0:
                return out
            weighted = mul(out, weights, tape)
            while weighted.data.ndim > 0:
                weighted = sum_axis(weighted, 0, tape)
            return weighted

        tape = Tape()
        grads = backward(scalar_loss(tape), tape)
        for t in inputs:
            numeric = numeric_gradient(lambda: scalar_loss().item(), t)
            worst = max(worst, relative_error(grads.get(t, np.zeros_like(t.data)), numeric))
    return worst
