"""Trainable parameters and the AdamW optimizer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from mvad.errors import ShapeError
from mvad.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class Parameter:
    """A trainable tensor plus its AdamW moment buffers and step counter."""

    tensor: Tensor
    name: str = ""
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step: int = 0

    def __post_init__(self):
        self.tensor.requires_grad = True
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


def adamw_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray | None],
    *,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Apply one AdamW update in place.

    Weight decay is decoupled: ``p ← p·(1 − lr·wd)`` before the bias-corrected
    Adam step. A ``None`` gradient counts as zero.
    """
    if len(params) != len(grads):
        raise ShapeError(f"adamw_step: {len(params)} params but {len(grads)} grads")
    for param, grad in zip(params, grads):
        data = param.tensor.data
        g = np.zeros_like(data) if grad is None else np.asarray(grad, dtype=data.dtype)
        if g.shape != data.shape:
            raise ShapeError(
                f"adamw_step: grad {g.shape} does not match {param.name} {data.shape}"
            )
        param.step += 1
        if weight_decay:
            data *= 1.0 - lr * weight_decay
        param.m = beta1 * param.m + (1.0 - beta1) * g
        param.v = beta2 * param.v + (1.0 - beta2) * g * g
        m_hat = param.m / (1.0 - beta1**param.step)
        v_hat = param.v / (1.0 - beta2**param.step)
        data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    """Stateful wrapper reading gradients from ``param.tensor.grad``.

    Usage:
        opt = AdamW(model.parameters(), lr=0.005, weight_decay=1e-4)
        with Tape() as tape:
            loss = ...
            tape.backward(loss)
        opt.step()
        opt.zero_grad()
    """

    def __init__(
        self,
        params: Iterable[Parameter],
        *,
        lr: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self) -> None:
        adamw_step(
            self.params,
            [p.tensor.grad for p in self.params],
            lr=self.lr,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()
