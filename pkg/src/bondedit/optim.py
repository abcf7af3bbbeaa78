"""Adam and the plateau learning-rate schedule."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable
from dataclasses import dataclass
from typing import Any

import numpy as np

from bondedit.config import LR_PROFILES
from bondedit.params import ParamStore

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdamSettings:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(store: ParamStore, lr: float, settings: AdamSettings = AdamSettings()) -> None:
    """One bias-corrected Adam update of every parameter, then zero the gradients.

    A parameter whose gradient and moments are all zero is left unchanged.
    """
    store.step += 1
    t = store.step
    b1, b2 = settings.beta1, settings.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for name in store.names():
        g = store.grad(name)
        m, v = store.moments(name)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        update = lr * m_hat / (np.sqrt(v_hat) + settings.eps)
        store.set_value(name, store.value(name) - update)
    store.zero_grads()


class PlateauSchedule:
    """Decay the learning rate when a maximised metric stops improving.

    ``patience`` counts evaluations. An evaluation that improves on the best
    value so far resets the counter, including one that lands exactly on the
    patience boundary.
    """

    def __init__(self, initial_lr: float, factor: float, patience: int, min_lr: float) -> None:
        self.lr = initial_lr
        self.factor = factor
        self.patience = max(1, patience)
        self.min_lr = min_lr
        self.best: float | None = None
        self.bad_evaluations = 0

    @classmethod
    def from_profile(cls, profile: str, initial_lr: float, eval_every: int) -> PlateauSchedule:
        """Build from a named profile whose patience is given in optimizer steps."""
        factor, patience_steps, min_lr = LR_PROFILES[profile]
        return cls(initial_lr, factor, math.ceil(patience_steps / eval_every), min_lr)

    def update(self, metric: float) -> float:
        if self.best is None or metric > self.best:
            self.best = metric
            self.bad_evaluations = 0
            return self.lr
        self.bad_evaluations += 1
        if self.bad_evaluations >= self.patience:
            new_lr = max(self.lr * self.factor, self.min_lr)
            if new_lr < self.lr:
                logger.info("learning rate %.3g -> %.3g (no improvement over best %.4f)", self.lr, new_lr, self.best)
            self.lr = new_lr
            self.bad_evaluations = 0
        return self.lr

    def state_dict(self) -> dict[str, Any]:
        return {
            "lr": self.lr,
            "factor": self.factor,
            "patience": self.patience,
            "min_lr": self.min_lr,
            "best": self.best,
            "bad_evaluations": self.bad_evaluations,
        }

    def load_state(self, state: dict[str, Any]) -> None:
        self.lr = float(state["lr"])
        self.factor = float(state["factor"])
        self.patience = int(state["patience"])
        self.min_lr = float(state["min_lr"])
        self.best = None if state["best"] is None else float(state["best"])
        self.bad_evaluations = int(state["bad_evaluations"])


def plateau_schedule(
    metric_history: Iterable[float],
    initial_lr: float = 0.001,
    factor: float = 0.5,
    patience: int = 1,
    min_lr: float = 5e-5,
) -> float:
    """Learning rate after replaying ``metric_history`` through a fresh schedule."""
    schedule = PlateauSchedule(initial_lr, factor, patience, min_lr)
    for metric in metric_history:
        schedule.update(metric)
    return schedule.lr
