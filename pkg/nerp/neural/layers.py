from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from nerp.configs import DropoutMode
from nerp.nerp_exceptions import CheckpointMismatch
from nerp.neural import functional as F
from nerp.neural.tensor import Param, Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Module:
    """Container that discovers Params and sub-Modules from its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Param]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Param):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> List[Param]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def zero_(self) -> "Module":
        for p in self.parameters():
            p.data[...] = 0.0
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise CheckpointMismatch(f"Parameter names differ: {missing[:5]}")
        for name, p in own.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != p.shape:
                raise CheckpointMismatch(f"{name}: expected {p.shape}, found {values.shape}")
            p.data[...] = values


class Linear(Module):
    def __init__(
        self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True
    ) -> None:
        self.weight = Param(glorot(rng, fan_in, fan_out))
        self.bias = Param(np.zeros(fan_out)) if bias else None

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear_forward(x, self.weight, self.bias)


class MLP(Module):
    """
    Stack of Linear layers with ReLU between them.

    `dropout_layers` lists the hidden layers (0-based) followed by Dropout(p). The
    output activation is either None or "sigmoid"; `relu_last` keeps the ReLU on the
    final layer as well, as the point-cloud set abstraction layers do.
    """

    def __init__(
        self,
        widths: Sequence[int],
        rng: np.random.Generator,
        dropout_p: float = 0.0,
        dropout_layers: Sequence[int] = (),
        output: Optional[str] = None,
        relu_last: bool = False,
        bias: bool = True,
    ) -> None:
        self.layers = [Linear(a, b, rng, bias=bias) for a, b in zip(widths, widths[1:])]
        self.dropout_p = dropout_p
        self.dropout_layers = tuple(dropout_layers)
        self.output = output
        self.relu_last = relu_last

    def __call__(
        self,
        x: Tensor,
        mode: DropoutMode = DropoutMode.Eval,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.relu_last:
                x = F.relu(x)
            if i in self.dropout_layers:
                x = F.dropout(x, self.dropout_p, mode, rng)
        if self.output == "sigmoid":
            x = F.sigmoid(x)
        return x
