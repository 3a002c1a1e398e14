import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np

from nerp.nerp_exceptions import NonFinite

BackwardFn = Callable[[np.ndarray], None]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def is_anomaly_enabled() -> bool:
    return getattr(_state, "anomaly", False)


@contextmanager
def no_grad() -> Iterator[None]:
    """Ops inside the block build no graph; used for inference and rollouts."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def detect_anomaly() -> Iterator[None]:
    """Every op output inside the block is checked for NaN/Inf."""
    previous = is_anomaly_enabled()
    _state.anomaly = True
    try:
        yield
    finally:
        _state.anomaly = previous


class Tensor:
    """
    A float64 array that remembers how it was produced.

    Each op stores its parents and a backward closure mapping the upstream gradient
    onto the parents. `backward()` walks the graph in reverse topological order.
    """

    def __init__(
        self,
        data,
        parents: Tuple["Tensor", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
        op: str = "",
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def requires_grad(self) -> bool:
        return self.backward_fn is not None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            grad = np.ones_like(self.data)
        self.accumulate(grad)
        for node in reversed(_topological_order(self)):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"


class Param(Tensor):
    """A trainable leaf: value, gradient and Adagrad accumulator of one shape."""

    def __init__(self, data, name: str = "") -> None:
        super().__init__(data, op="param")
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.accumulator = np.zeros_like(self.data)

    @property
    def requires_grad(self) -> bool:
        return True

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Param({self.name or '?'}, shape={self.shape})"


def _topological_order(root: Tensor) -> Sequence[Tensor]:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def make_node(
    data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str
) -> Tensor:
    """Wrap an op result, recording the graph edge only when a parent needs gradients."""
    if is_anomaly_enabled() and not np.all(np.isfinite(data)):
        raise NonFinite(f"Operation '{op}' produced non-finite values")
    tracked = tuple(p for p in parents if p.requires_grad)
    if not tracked or not is_grad_enabled():
        return Tensor(data, op=op)
    return Tensor(data, parents=tracked, backward_fn=backward_fn, op=op)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)
