"""Loss terms and the training loop.

The objective for one episode is a weighted sum of five terms:

* actor loss: ``-sum A * log p`` over the sub-actions up to and including the
  first wrong one, with advantages ``A = r + gamma * V(next) - V(current)``
  treated as constants and ``V`` after the last step taken as 0;
* value loss: squared error between each step's value estimate and its return;
* atom-pair loss: binary cross-entropy of ``sigmoid(score)`` against "is a gold
  pair not yet edited", over unmasked candidates;
* over-length loss: ``-log p(stop)`` at each step taken past the gold length;
* in-top-K loss: ``-log(exp(s_g) / (exp(s_g) + sum_k exp(s_k)))`` where ``s_g``
  is the best-scored remaining gold pair and ``s_k`` the top-K scores.
"""

from __future__ import annotations

import functools
import logging
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from tqdm import trange

from bondedit.config import ModelConfig
from bondedit.errors import ConfigError, DataError, NonFiniteError, TrainingDivergedError
from bondedit.logs import JsonlWriter, dumps
from bondedit.model import ReactionModel
from bondedit.molgraph import ReactionRecord
from bondedit.optim import AdamSettings, PlateauSchedule, adam_step
from bondedit.policy import Episode, StepOutcome, rollout_supervised
from bondedit.tape import Tape, Tensor, add, concat, logsumexp, mul, reshape, scale, softplus, sub, sum_

logger = logging.getLogger(__name__)

LOSS_TERMS = ("a2c", "value", "atom_pair", "over_length", "in_top_k")

__all__ = [
    "Episode",
    "FitResult",
    "LossWeights",
    "StepOutcome",
    "a2c_loss",
    "advantages",
    "atom_pair_loss",
    "fit",
    "in_topk_loss",
    "over_length_loss",
    "total_loss",
    "value_loss",
]


@dataclass(frozen=True)
class LossWeights:
    a2c: float = 1.0
    value: float = 0.5
    atom_pair: float = 1.0
    over_length: float = 0.2
    in_top_k: float = 0.2

    def __post_init__(self) -> None:
        if min(asdict(self).values()) < 0:
            msg = "loss weights must be non-negative"
            raise ConfigError(msg)

    @classmethod
    def from_config(cls, config: ModelConfig) -> LossWeights:
        return cls(
            a2c=config.lambda_a2c,
            value=config.lambda_value,
            atom_pair=config.lambda_atom_pair,
            over_length=config.lambda_over_length,
            in_top_k=config.lambda_in_top_k,
        )


def _total(tape: Tape, terms: Sequence[Tensor]) -> Tensor:
    if not terms:
        return tape.constant(0.0)
    return reshape(functools.reduce(add, terms), ())


def _zeta_at(episode: Episode, step: StepOutcome, k: int) -> bool:
    return bool(episode.zeta[3 * step.step + k])


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def advantages(episode: Episode, gamma: float = 1.0) -> list[tuple[float, ...]]:
    """Per step, one temporal-difference advantage per evaluated sub-action."""
    values = [float(s.value.value) for s in episode.steps]
    out = []
    for t, step in enumerate(episode.steps):
        v_next = values[t + 1] if t + 1 < len(values) else 0.0
        out.append(tuple(r + gamma * v_next - values[t] for r in step.rewards))
    return out


def a2c_loss(
    tape: Tape, episode: Episode, gamma: float = 1.0, frozen: Sequence[tuple[float, ...]] | None = None
) -> Tensor:
    """Actor term; ``frozen`` replaces the advantages computed from this episode's values."""
    terms = []
    adv_rows = advantages(episode, gamma) if frozen is None else frozen
    for step, adv in zip(episode.steps, adv_rows, strict=True):
        for k, (lp, a) in enumerate(zip(step.log_probs, adv, strict=True)):
            if _zeta_at(episode, step, k):
                terms.append(scale(lp, -a))
    return _total(tape, terms)


def value_loss(tape: Tape, episode: Episode, gamma: float = 1.0) -> Tensor:
    terms = []
    for step, ret in zip(episode.steps, episode.returns(gamma), strict=True):
        if _zeta_at(episode, step, 0):
            diff = sub(step.value, ret)
            terms.append(mul(diff, diff))
    return _total(tape, terms)


def atom_pair_loss(tape: Tape, episode: Episode) -> Tensor:
    """Masked BCE over every scored candidate of every step."""
    terms = []
    for step in episode.steps:
        if step.scored is None or step.targets is None or not len(step.targets) or not _zeta_at(episode, step, 0):
            continue
        s = step.scored.scores
        y = step.targets
        eta = step.scored.candidates.eligible.astype(np.float64)
        bce = add(mul(y, softplus(scale(s, -1.0))), mul(1.0 - y, softplus(s)))
        terms.append(sum_(mul(eta, bce)))
    return _total(tape, terms)


def over_length_loss(tape: Tape, episode: Episode) -> Tensor:
    terms = [
        scale(step.stop_log_prob(), -1.0)
        for step in episode.steps
        if episode.gold_length <= step.step < episode.num_edits
    ]
    return _total(tape, terms)


def in_topk_loss(tape: Tape, episode: Episode) -> Tensor:
    terms = []
    for step in episode.steps:
        if step.gold_best is None or step.topk is None or step.topk.scores is None or step.scored is None:
            continue
        if not _zeta_at(episode, step, 0):
            continue
        s_gold = step.scored.scores[step.gold_best]
        denominator = logsumexp(concat([reshape(s_gold, (1,)), step.topk.scores]))
        terms.append(sub(denominator, s_gold))
    return _total(tape, terms)


def total_loss(
    tape: Tape,
    episode: Episode,
    weights: LossWeights = LossWeights(),
    gamma: float = 1.0,
    frozen_advantages: Sequence[tuple[float, ...]] | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the five terms, plus their unweighted values."""
    parts = {
        "a2c": a2c_loss(tape, episode, gamma, frozen_advantages),
        "value": value_loss(tape, episode, gamma),
        "atom_pair": atom_pair_loss(tape, episode),
        "over_length": over_length_loss(tape, episode),
        "in_top_k": in_topk_loss(tape, episode),
    }
    weighted = [scale(parts[name], getattr(weights, name)) for name in LOSS_TERMS]
    return _total(tape, weighted), {name: float(parts[name].value) for name in LOSS_TERMS}


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    iterations: int = 0
    best_precision: float | None = None
    final_lr: float = 0.0
    checkpoints: list[Path] = field(default_factory=list)
    history: list[dict[str, Any]] = field(default_factory=list)


Validator = Callable[[ReactionModel, Sequence[ReactionRecord]], float]


def _default_validator(model: ReactionModel, records: Sequence[ReactionRecord]) -> float:
    from bondedit.metrics import validation_precision

    return validation_precision(model, records)


def train_batch(
    model: ReactionModel,
    records: Sequence[ReactionRecord],
    rng: np.random.Generator,
    weights: LossWeights,
) -> dict[str, float]:
    """Roll out and backpropagate every record; gradients are summed in batch order."""
    config = model.config
    sampler = rng if config.train_sampling == "sample" else None
    totals = dict.fromkeys(("loss", "reward", "success", *LOSS_TERMS), 0.0)
    for record in records:
        tape = model.new_tape()
        episode = rollout_supervised(model, tape, record, sampler)
        loss, parts = total_loss(tape, episode, weights, config.gamma)
        tape.backward(loss, model.store)
        totals["loss"] += float(loss.value)
        totals["reward"] += episode.total_reward
        totals["success"] += 1.0 if episode.succeeded else 0.0
        for name, value in parts.items():
            totals[name] += value
    return {name: value / len(records) for name, value in totals.items()}


def fit(
    model: ReactionModel,
    train: Sequence[ReactionRecord],
    valid: Sequence[ReactionRecord] = (),
    out_dir: Path | None = None,
    max_iterations: int | None = None,
    progress: bool = True,
    validator: Validator | None = None,
) -> FitResult:
    """Train ``model`` in place; returns the run summary.

    Every ``eval_every`` iterations the validation Precision@1 drives the
    plateau schedule. Checkpoints go to ``out_dir`` every ``checkpoint_every``
    iterations and once at the end.
    """
    if not train:
        msg = "training set is empty"
        raise DataError(msg)
    config = model.config
    iterations = max_iterations or config.max_iterations
    rng = np.random.default_rng(config.seed)
    weights = LossWeights.from_config(config)
    adam = AdamSettings(config.adam_beta1, config.adam_beta2, config.adam_eps)
    schedule = PlateauSchedule.from_profile(config.lr_profile, config.learning_rate, config.eval_every)
    validator = validator or _default_validator
    result = FitResult()
    batch_size = config.batch_size

    log = JsonlWriter(out_dir / "train_log.jsonl") if out_dir is not None else None
    logger.info(
        "training on %d reaction(s), %d validation, %d iteration(s), %d parameters",
        len(train),
        len(valid),
        iterations,
        model.store.num_parameters(),
    )
    try:
        for it in trange(1, iterations + 1, desc="train", disable=not progress):
            picks = rng.choice(len(train), size=batch_size, replace=len(train) < batch_size)
            batch = [train[int(i)] for i in picks]
            try:
                stats = train_batch(model, batch, rng, weights)
            except NonFiniteError as exc:
                _dump_divergence(out_dir, it, batch, exc)
                msg = f"non-finite value in {exc.op} at iteration {it}"
                raise TrainingDivergedError(msg) from exc
            adam_step(model.store, schedule.lr, adam)

            row: dict[str, Any] = {"iteration": it, "lr": schedule.lr, **stats}
            if valid and it % config.eval_every == 0:
                precision = validator(model, valid)
                schedule.update(precision)
                row["valid_precision_at_1"] = precision
                if result.best_precision is None or precision > result.best_precision:
                    result.best_precision = precision
                logger.info("iteration %d: loss %.4f, valid P@1 %.3f, lr %.2g", it, stats["loss"], precision, schedule.lr)
            result.history.append(row)
            if log is not None:
                log.write(row)
            if out_dir is not None and it % config.checkpoint_every == 0:
                result.checkpoints.append(_checkpoint(model, out_dir, f"checkpoint-{it:07d}.json", it, schedule))
            result.iterations = it
    finally:
        if log is not None:
            log.close()

    if out_dir is not None:
        result.checkpoints.append(_checkpoint(model, out_dir, "checkpoint-final.json", result.iterations, schedule))
    result.final_lr = schedule.lr
    return result


def _checkpoint(model: ReactionModel, out_dir: Path, name: str, iteration: int, schedule: PlateauSchedule) -> Path:
    path = out_dir / name
    model.save(path, {"iteration": iteration, "schedule": schedule.state_dict()})
    return path


def _dump_divergence(out_dir: Path | None, iteration: int, batch: Sequence[ReactionRecord], exc: NonFiniteError) -> None:
    report = {"iteration": iteration, "op": exc.op, "records": [r.record_id for r in batch]}
    logger.error("non-finite value in %s at iteration %d (records %s)", exc.op, iteration, report["records"])
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "divergence.json").write_text(dumps(report) + "\n", encoding="utf-8")
