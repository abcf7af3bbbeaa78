"""Parameterised building blocks shared by the encoder, pair scorer and heads.

Each layer is a frozen description (name prefix plus sizes). ``register``
creates its parameters in a ``ParamStore``; calling it binds them on a tape.
Inputs may be a single row ``(d,)`` or a batch ``(n, d)``.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from bondedit.params import ParamStore
from bondedit.tape import Tape, Tensor, concat, relu, sigmoid, sub, tanh

Activation = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class Dense:
    name: str
    in_dim: int
    out_dim: int
    bias: bool = True

    def register(self, store: ParamStore, rng: np.random.Generator) -> None:
        store.add(f"{self.name}.W", (self.in_dim, self.out_dim), rng)
        if self.bias:
            store.add(f"{self.name}.b", (self.out_dim,), rng, init="zeros")

    def __call__(self, tape: Tape, store: ParamStore, x: Tensor) -> Tensor:
        y = x @ tape.param(store, f"{self.name}.W")
        if self.bias:
            y = y + tape.param(store, f"{self.name}.b")
        return y


@dataclass(frozen=True)
class TwoLayerNet:
    """ReLU hidden layer, a residual ReLU layer, then a linear read-out."""

    name: str
    in_dim: int
    hidden: int
    out_dim: int

    @property
    def parts(self) -> tuple[Dense, Dense, Dense]:
        return (
            Dense(f"{self.name}.hidden", self.in_dim, self.hidden),
            Dense(f"{self.name}.residual", self.hidden, self.hidden),
            Dense(f"{self.name}.out", self.hidden, self.out_dim),
        )

    def register(self, store: ParamStore, rng: np.random.Generator) -> None:
        for part in self.parts:
            part.register(store, rng)

    def __call__(self, tape: Tape, store: ParamStore, x: Tensor) -> Tensor:
        first, residual, out = self.parts
        h = relu(first(tape, store, x))
        h = h + relu(residual(tape, store, h))
        return out(tape, store, h)


@dataclass(frozen=True)
class Highway:
    """``alpha * transform(z) + (1 - alpha) * carry`` with a sigmoid gate over ``z``."""

    name: str
    in_dim: int
    out_dim: int

    @property
    def transform(self) -> Dense:
        return Dense(f"{self.name}.transform", self.in_dim, self.out_dim)

    @property
    def gate(self) -> Dense:
        return Dense(f"{self.name}.gate", self.in_dim, self.out_dim)

    def register(self, store: ParamStore, rng: np.random.Generator) -> None:
        self.transform.register(store, rng)
        self.gate.register(store, rng)

    def __call__(self, tape: Tape, store: ParamStore, z: Tensor, carry: Tensor) -> Tensor:
        candidate = relu(self.transform(tape, store, z))
        alpha = sigmoid(self.gate(tape, store, z))
        return alpha * candidate + sub(1.0, alpha) * carry


@dataclass(frozen=True)
class GRUCell:
    name: str
    in_dim: int
    hidden: int

    def _dense(self, part: str, in_dim: int, bias: bool = True) -> Dense:
        return Dense(f"{self.name}.{part}", in_dim, self.hidden, bias)

    def register(self, store: ParamStore, rng: np.random.Generator) -> None:
        both = self.in_dim + self.hidden
        self._dense("reset", both).register(store, rng)
        self._dense("update", both).register(store, rng)
        self._dense("input", self.in_dim).register(store, rng)
        self._dense("recurrent", self.hidden, bias=False).register(store, rng)

    def __call__(self, tape: Tape, store: ParamStore, h: Tensor, x: Tensor) -> Tensor:
        both = self.in_dim + self.hidden
        xh = concat([x, h])
        r = sigmoid(self._dense("reset", both)(tape, store, xh))
        u = sigmoid(self._dense("update", both)(tape, store, xh))
        recurrent = self._dense("recurrent", self.hidden, bias=False)(tape, store, h)
        n = tanh(self._dense("input", self.in_dim)(tape, store, x) + r * recurrent)
        return sub(1.0, u) * n + u * h
