"""Bias-corrected Adam acting in place on tensor data."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamMoments:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamMoments":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    moments: AdamMoments,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    if not (len(params) == len(grads) == len(moments.m) == len(moments.v)):
        raise ShapeError("adam_step: params, grads and moments differ in length")
    moments.t += 1
    t = moments.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, moments.m, moments.v):
        if m.shape != p.data.shape or v.shape != p.data.shape:
            raise ShapeError(f"adam_step: moment shape {m.shape} != param shape {p.data.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class Adam:
    params: list[Tensor]
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    moments: AdamMoments = field(init=False)

    def __post_init__(self):
        self.moments = AdamMoments.zeros_like(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.moments,
                  self.lr, self.beta1, self.beta2, self.eps)
