from typing import Iterable, List

import numpy as np

from nerp.nerp_configs import AdagradConfig
from nerp.neural.tensor import Param


def adagrad_step(params: Iterable[Param], cfg: AdagradConfig, step: int = 1) -> None:
    """
    One Adagrad update: acc += g^2; value -= clr * g / (sqrt(acc) + eps); grads zeroed.

    `step` is 1-based and only matters when lr_decay is non-zero.
    """
    clr = cfg.lr / (1.0 + (step - 1) * cfg.lr_decay)
    for p in params:
        grad = p.grad
        if cfg.weight_decay != 0.0:
            grad = grad + cfg.weight_decay * p.data
        p.accumulator += grad * grad
        p.data -= clr * grad / (np.sqrt(p.accumulator) + cfg.eps)
        p.zero_grad()


class Adagrad:
    def __init__(self, params: Iterable[Param], cfg: AdagradConfig, reset: bool = True) -> None:
        self.params: List[Param] = list(params)
        self.cfg = cfg
        self.steps = 0
        # reset=False keeps accumulators restored from a checkpoint
        for p in self.params if reset else ():
            p.accumulator = np.full_like(p.data, cfg.initial_accumulator)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.steps += 1
        adagrad_step(self.params, self.cfg, self.steps)
