from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from nerp.configs import DropoutMode
from nerp.nerp_exceptions import EmptyGroup, ShapeMismatch
from nerp.neural.tensor import Tensor, as_tensor, make_node

BCE_CLAMP = 1e-7

Groups = Union[np.ndarray, Sequence[Sequence[int]]]


def _push(t: Tensor, grad: np.ndarray) -> None:
    if t.requires_grad:
        t.accumulate(grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g: np.ndarray) -> None:
        _push(a, g @ b.data.T)
        _push(b, a.data.T @ g)

    return make_node(a.data @ b.data, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may also be a bias vector added to every row of `a`."""
    a, b = as_tensor(a), as_tensor(b)
    row_bias = a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]
    if a.shape != b.shape and not row_bias:
        raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape} do not agree")

    def backward(g: np.ndarray) -> None:
        _push(a, g)
        _push(b, g.sum(axis=0) if row_bias else g)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub: shapes {a.shape} and {b.shape} do not agree")

    def backward(g: np.ndarray) -> None:
        _push(a, g)
        _push(b, -g)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _push(a, g * factor)

    return make_node(a.data * factor, (a,), backward, "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: shapes {a.shape} and {b.shape} do not agree")

    def backward(g: np.ndarray) -> None:
        _push(a, g * b.data)
        _push(b, g * a.data)

    return make_node(a.data * b.data, (a, b), backward, "mul")


def total(terms: Sequence[Tensor]) -> Tensor:
    """Sum of scalar tensors."""
    if not terms:
        return Tensor(0.0)

    def backward(g: np.ndarray) -> None:
        for t in terms:
            _push(t, np.broadcast_to(g, t.shape))

    value = sum(float(t.data.sum()) for t in terms)
    return make_node(np.asarray(value), tuple(terms), backward, "total")


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def backward(g: np.ndarray) -> None:
        _push(x, g * positive)

    return make_node(np.where(positive, x.data, 0.0), (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def backward(g: np.ndarray) -> None:
        _push(x, g * out * (1.0 - out))

    return make_node(out, (x,), backward, "sigmoid")


def dropout(
    x: Tensor, p: float, mode: DropoutMode, rng: Optional[np.random.Generator] = None
) -> Tensor:
    """
    Inverted dropout. In train and stochastic-inference modes each element is zeroed with
    probability p and survivors are scaled by 1/(1-p); eval mode is the identity.
    """
    if p == 0.0 or mode == DropoutMode.Eval:
        return x
    if rng is None:
        rng = np.random.default_rng()
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g: np.ndarray) -> None:
        _push(x, g * keep)

    return make_node(x.data * keep, (x,), backward, "dropout")


def gather_rows(x: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def backward(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x.accumulate(full)

    return make_node(x.data[index], (x,), backward, "gather_rows")


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g: np.ndarray) -> None:
        for part, piece in zip(parts, np.split(g, widths, axis=axis)):
            _push(part, piece)

    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from exc
    return make_node(data, tuple(parts), backward, "concat")


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _push(x, g.reshape(x.shape))

    return make_node(x.data.reshape(shape), (x,), backward, "reshape")


def max_aggregate(features: Tensor, groups: Groups) -> Tensor:
    """
    Componentwise max of the feature rows in each group, giving one row per group.

    `groups` is either a list of index lists (ragged) or a G x K integer array. The
    gradient of each output entry routes to the row that attained the max.
    """
    if features.data.ndim != 2:
        raise ShapeMismatch(f"max_aggregate expects M x H features, got {features.shape}")
    width = features.shape[1]
    if isinstance(groups, np.ndarray) and groups.ndim == 2:
        if groups.shape[1] == 0:
            raise EmptyGroup("max_aggregate: groups of size zero")
        stacked = features.data[groups]
        winner = groups[np.arange(groups.shape[0])[:, None], stacked.argmax(axis=1)]
        out = stacked.max(axis=1)
    else:
        winner = np.zeros((len(groups), width), dtype=np.int64)
        out = np.zeros((len(groups), width))
        for g, members in enumerate(groups):
            members = np.asarray(members, dtype=np.int64)
            if members.size == 0:
                raise EmptyGroup(f"max_aggregate: group {g} is empty")
            rows = features.data[members]
            best = rows.argmax(axis=0)
            winner[g] = members[best]
            out[g] = rows[best, np.arange(width)]
    columns = np.broadcast_to(np.arange(width), winner.shape)

    def backward(g: np.ndarray) -> None:
        if not features.requires_grad:
            return
        full = np.zeros_like(features.data)
        np.add.at(full, (winner, columns), g)
        features.accumulate(full)

    return make_node(out, (features,), backward, "max_aggregate")


def linear_forward(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = xW + b."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeMismatch(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def bce(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of probabilities, clamped to [1e-7, 1-1e-7]."""
    y = np.asarray(target, dtype=np.float64)
    if pred.shape != y.shape:
        raise ShapeMismatch(f"bce: prediction {pred.shape} vs target {y.shape}")
    p = np.clip(pred.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (pred.data >= BCE_CLAMP) & (pred.data <= 1.0 - BCE_CLAMP)
    n = max(y.size, 1)
    value = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum() / n

    def backward(g: np.ndarray) -> None:
        local = (-y / p + (1.0 - y) / (1.0 - p)) / n
        _push(pred, g * local * inside)

    return make_node(np.asarray(value), (pred,), backward, "bce")


def l2_loss(pred: Tensor, target) -> Tensor:
    """Euclidean norm of pred - target; the subgradient at zero is zero."""
    goal = np.asarray(target, dtype=np.float64)
    if pred.data.size != goal.size:
        raise ShapeMismatch(f"l2_loss: prediction {pred.shape} vs target {goal.shape}")
    diff = pred.data - goal.reshape(pred.shape)
    norm = float(np.sqrt((diff**2).sum()))

    def backward(g: np.ndarray) -> None:
        if norm > 0.0:
            _push(pred, g * diff / norm)

    return make_node(np.asarray(norm), (pred,), backward, "l2_loss")
