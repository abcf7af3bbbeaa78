"""Central finite-difference check of every parameter gradient.

The loss is the full training objective on one reaction, rolled out along the
gold actions so every head, the GRU and the post-edit refresh are on the
path. Advantages are held at their values at the unperturbed point, as
the tape treats them as constants. Relative error per entry is
``|a - n| / max(|a|, |n|, floor)``; the floor keeps entries whose true
gradient is near zero from reporting rounding noise as error.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from tqdm import tqdm

from bondedit.config import ModelConfig
from bondedit.datasets import load_records
from bondedit.errors import DataError
from bondedit.model import ReactionModel
from bondedit.molgraph import ReactionRecord
from bondedit.policy import rollout_supervised
from bondedit.training import LossWeights, advantages, total_loss

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
DENOMINATOR_FLOOR = 1e-3
BIAS_SCALE = 0.1
FIXTURE_NAME = "gradcheck.jsonl"

# Small enough that every entry is checked in well under a minute.
GRADCHECK_CONFIG = {
    "atom_embed_dim": 4,
    "bond_embed_dim": 3,
    "state_dim": 5,
    "message_passing_steps": 2,
    "pair_hidden": 5,
    "pair_score_hidden": 4,
    "gru_hidden": 5,
    "value_hidden": 4,
    "head_hidden": 4,
    "top_k": 6,
    "max_steps": 4,
    "dtype": "float64",
}


@dataclass
class GradcheckReport:
    max_rel_error: float = 0.0
    worst: tuple[str, tuple[int, ...]] | None = None
    checked: int = 0
    per_tensor: dict[str, float] = field(default_factory=dict)

    def passed(self, tolerance: float = DEFAULT_TOLERANCE) -> bool:
        return self.max_rel_error < tolerance


def fixture_path() -> Path:
    return Path(str(resources.files("bondedit") / "fixtures" / FIXTURE_NAME))


def load_fixture(path: Path | None = None) -> ReactionRecord:
    records = load_records(path or fixture_path())
    if not records:
        msg = "gradcheck fixture holds no usable reaction"
        raise DataError(msg, str(path or fixture_path()))
    return records[0]


def gradcheck_config(**overrides: object) -> ModelConfig:
    return ModelConfig.desk(**{**GRADCHECK_CONFIG, **overrides})


def gradcheck_model(config: ModelConfig | None = None) -> ReactionModel:
    """A model whose biases are drawn from ``N(0, BIAS_SCALE)`` instead of zeros.

    Zero biases put ReLU inputs exactly on the kink whenever a layer reads an
    all-zero vector, and central differences disagree with any one-sided
    derivative there.
    """
    model = ReactionModel(config or gradcheck_config())
    rng = np.random.default_rng(model.config.seed)
    for name in model.store.names():
        if name.endswith(".b"):
            shape = model.store.value(name).shape
            model.store.set_value(name, rng.normal(0.0, BIAS_SCALE, size=shape))
    return model


Advantages = list[tuple[float, ...]]


def episode_advantages(model: ReactionModel, record: ReactionRecord) -> Advantages:
    """Advantages of the gold rollout at the current parameters."""
    tape = model.new_tape(record=False)
    episode = rollout_supervised(model, tape, record, follow_gold=True)
    return advantages(episode, model.config.gamma)


def episode_loss(
    model: ReactionModel,
    record: ReactionRecord,
    backward: bool = False,
    frozen: Advantages | None = None,
) -> float:
    """Loss along the gold actions; with ``backward`` the gradients land in the store.

    The tape treats advantages as constants, so a finite-difference check must
    hold them at the values of the unperturbed point via ``frozen``.
    """
    tape = model.new_tape(record=backward)
    episode = rollout_supervised(model, tape, record, follow_gold=True)
    weights = LossWeights.from_config(model.config)
    loss, _ = total_loss(tape, episode, weights, model.config.gamma, frozen_advantages=frozen)
    if backward:
        tape.backward(loss, model.store)
    return float(loss.value)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOMINATOR_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def run_gradcheck(
    model: ReactionModel,
    record: ReactionRecord,
    step: float = DEFAULT_STEP,
    names: list[str] | None = None,
    progress: bool = False,
) -> GradcheckReport:
    """Compare tape gradients with central differences for every entry of every tensor."""
    store = model.store
    store.zero_grads()
    frozen = episode_advantages(model, record)
    episode_loss(model, record, backward=True, frozen=frozen)
    analytic = {name: store.grad(name).copy() for name in store.names()}
    store.zero_grads()

    report = GradcheckReport()
    for name in tqdm(names or store.names(), desc="gradcheck", disable=not progress):
        value = store.value(name).copy()
        numeric = np.zeros_like(value)
        for index in np.ndindex(value.shape):
            original = value[index]
            value[index] = original + step
            store.set_value(name, value)
            upper = episode_loss(model, record, frozen=frozen)
            value[index] = original - step
            store.set_value(name, value)
            lower = episode_loss(model, record, frozen=frozen)
            value[index] = original
            numeric[index] = (upper - lower) / (2.0 * step)
        store.set_value(name, value)

        errors = relative_error(analytic[name], numeric)
        report.checked += errors.size
        worst = float(errors.max()) if errors.size else 0.0
        report.per_tensor[name] = worst
        if errors.size and (report.worst is None or worst > report.max_rel_error):
            report.max_rel_error = worst
            report.worst = (name, tuple(int(i) for i in np.unravel_index(int(errors.argmax()), errors.shape)))
        logger.debug("gradcheck %s: max rel. error %.3g over %d entries", name, worst, errors.size)
    logger.info("gradcheck: max rel. error %.3g over %d entries", report.max_rel_error, report.checked)
    return report
