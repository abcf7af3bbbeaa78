"""Loss terms against hand computations, and the training loop.

Run with: pytest tests/test_training.py -v
          pytest tests/test_training.py -v -m slow   (single-reaction overfit)
"""

from __future__ import annotations

import json

import numpy as np
import pytest

from bondedit.config import ModelConfig
from bondedit.errors import ConfigError, DataError, TrainingDivergedError
from bondedit.logs import read_jsonl
from bondedit.model import ReactionModel
from bondedit.pairnet import CandidateSet, PairScores, TopKSet
from bondedit.policy import Episode, StepOutcome
from bondedit.smiles import parse_smiles
from bondedit.tape import Tape, take
from bondedit.training import (
    LossWeights,
    a2c_loss,
    advantages,
    atom_pair_loss,
    fit,
    in_topk_loss,
    over_length_loss,
    total_loss,
    value_loss,
)

from conftest import TINY_CONFIG

pytestmark = [pytest.mark.model]


def _softplus(x: float) -> float:
    return float(np.log1p(np.exp(x)))


def _step(tape: Tape, step: int, signal: int, log_probs: list[float], rewards: list[float], value: float, logit: float = 0.3) -> StepOutcome:
    return StepOutcome(
        step=step,
        signal=signal,
        log_probs=[tape.variable(lp) for lp in log_probs],
        probabilities=[float(np.exp(lp)) for lp in log_probs],
        value=tape.variable(value),
        signal_logit=tape.variable(logit),
        rewards=rewards,
    )


@pytest.fixture
def two_step_episode() -> tuple[Tape, Episode]:
    """One correct edit then a clean stop; the delayed +2 sits on the stop."""
    tape = Tape()
    steps = [
        _step(tape, 0, 1, [-0.1, -0.2, -0.3], [1.0, 1.0, 1.0], 0.5),
        _step(tape, 1, 0, [-0.4], [3.0], 0.25),
    ]
    return tape, Episode("hand", steps, gold_length=1, max_steps=2, first_wrong=None, final_reward=2.0, predicted=())


@pytest.fixture
def scored_episode() -> tuple[Tape, Episode]:
    """One step over the three pairs of CCO with (1, 2) masked and (0, 1) gold."""
    tape = Tape()
    candidates = CandidateSet.of(parse_smiles("CCO"), consumed={(1, 2)})
    scores = tape.variable([2.0, -1.0, 0.5])
    step = _step(tape, 0, 0, [-0.5], [-3.0], 0.0)
    step.scored = PairScores(candidates, tape.constant(np.zeros((3, 2))), scores)
    step.targets = np.array([1.0, 0.0, 0.0])
    step.topk = TopKSet([1, 2], [(0, 2), (1, 2)], take(scores, [1, 2]), None)
    step.gold_best = 0
    return tape, Episode("scored", [step], gold_length=1, max_steps=1, first_wrong=0, final_reward=-2.0, predicted=())


# =============================================================================
# Loss terms
# =============================================================================


class TestLossTerms:
    """Each term on a hand-built episode."""

    def test_advantages(self, two_step_episode):
        _, episode = two_step_episode
        assert advantages(episode) == [(0.75, 0.75, 0.75), (2.75,)]

    def test_a2c(self, two_step_episode):
        tape, episode = two_step_episode
        loss = a2c_loss(tape, episode)
        assert loss.item() == pytest.approx(-(0.75 * -0.6 + 2.75 * -0.4))
        grads = tape.backward(loss)
        lp = episode.steps[0].log_probs[0]
        assert float(grads[lp.node]) == pytest.approx(-0.75)
        assert float(grads[episode.steps[1].log_probs[0].node]) == pytest.approx(-2.75)

    def test_advantages_are_constants(self, two_step_episode):
        tape, episode = two_step_episode
        grads = tape.backward(a2c_loss(tape, episode))
        assert episode.steps[0].value.node not in grads

    def test_value(self, two_step_episode):
        tape, episode = two_step_episode
        loss = value_loss(tape, episode)
        assert loss.item() == pytest.approx((0.5 - 6.0) ** 2 + (0.25 - 3.0) ** 2)
        grads = tape.backward(loss)
        assert float(grads[episode.steps[0].value.node]) == pytest.approx(2 * (0.5 - 6.0))

    def test_over_length(self):
        tape = Tape()
        steps = [
            _step(tape, 0, 1, [-0.1, -0.1, -0.1], [1.0, 1.0, 1.0], 0.0, logit=0.1),
            _step(tape, 1, 1, [-0.2, -0.2, -0.2], [-1.0, 1.0, 1.0], 0.0, logit=0.3),
            _step(tape, 2, 0, [-0.3], [-3.0], 0.0, logit=0.7),
        ]
        episode = Episode("long", steps, gold_length=1, max_steps=3, first_wrong=None, final_reward=-2.0, predicted=())
        assert over_length_loss(tape, episode).item() == pytest.approx(_softplus(0.3))

    def test_over_length_is_zero_within_gold_length(self, two_step_episode):
        tape, episode = two_step_episode
        assert over_length_loss(tape, episode).item() == 0.0

    def test_atom_pair(self, scored_episode):
        tape, episode = scored_episode
        assert atom_pair_loss(tape, episode).item() == pytest.approx(_softplus(-2.0) + _softplus(-1.0))

    def test_in_top_k(self, scored_episode):
        tape, episode = scored_episode
        expected = np.log(np.exp(2.0) + np.exp(-1.0) + np.exp(0.5)) - 2.0
        loss = in_topk_loss(tape, episode)
        assert loss.item() == pytest.approx(expected)
        grads = tape.backward(loss)
        scores = episode.steps[0].scored.scores
        assert float(grads[scores.node][0]) == pytest.approx(np.exp(2.0) / np.exp(expected + 2.0) - 1.0)

    def test_total_is_the_weighted_sum(self, scored_episode):
        tape, episode = scored_episode
        weights = LossWeights(a2c=1.0, value=0.5, atom_pair=2.0, over_length=0.2, in_top_k=0.3)
        total, parts = total_loss(tape, episode, weights)
        expected = sum(getattr(weights, name) * value for name, value in parts.items())
        assert total.item() == pytest.approx(expected)

    def test_negative_weight(self):
        with pytest.raises(ConfigError):
            LossWeights(value=-1.0)


# =============================================================================
# Training loop
# =============================================================================


class TestFit:
    """Iterations, checkpoints, the JSON-lines log and divergence."""

    def test_log_and_checkpoints(self, tmp_path, tiny_model, toy_splits):
        result = fit(tiny_model, toy_splits["train"], toy_splits["valid"], tmp_path, max_iterations=5, progress=False, validator=lambda m, r: 0.5)
        assert result.iterations == 5
        assert result.best_precision == 0.5
        assert [p.name for p in result.checkpoints] == ["checkpoint-0000005.json", "checkpoint-final.json"]
        rows = read_jsonl(tmp_path / "train_log.jsonl")
        assert [r["iteration"] for r in rows] == [1, 2, 3, 4, 5]
        assert rows[-1]["valid_precision_at_1"] == 0.5
        assert {"loss", "reward", "success", "a2c", "in_top_k", "lr"} <= rows[0].keys()

        model, state = ReactionModel.load(tmp_path / "checkpoint-final.json")
        assert state["iteration"] == 5
        for name in model.store.names():
            np.testing.assert_array_equal(model.store.value(name), tiny_model.store.value(name))

    def test_parameters_move(self, tiny_model, toy_splits):
        before = tiny_model.store.snapshot()
        fit(tiny_model, toy_splits["train"], max_iterations=2, progress=False)
        assert any(not np.array_equal(before[n], tiny_model.store.value(n)) for n in before)

    def test_seeded_runs_agree(self, toy_splits):
        models = [ReactionModel(ModelConfig.desk(**TINY_CONFIG)) for _ in range(2)]
        for model in models:
            fit(model, toy_splits["train"], max_iterations=2, progress=False)
        for name in models[0].store.names():
            np.testing.assert_array_equal(models[0].store.value(name), models[1].store.value(name))

    def test_default_validator(self, tiny_model, toy_splits):
        result = fit(tiny_model, toy_splits["train"], toy_splits["valid"], max_iterations=5, progress=False)
        assert 0.0 <= result.best_precision <= 1.0

    def test_divergence_is_reported(self, tmp_path, tiny_model, toy_splits):
        store = tiny_model.store
        store.set_value("atom.embed", np.full(store.value("atom.embed").shape, np.nan))
        with pytest.raises(TrainingDivergedError, match="iteration 1"):
            fit(tiny_model, toy_splits["train"], out_dir=tmp_path, max_iterations=3, progress=False)
        report = json.loads((tmp_path / "divergence.json").read_text(encoding="utf-8"))
        assert report["iteration"] == 1
        assert len(report["records"]) == TINY_CONFIG["batch_size"]

    def test_empty_training_set(self, tiny_model):
        with pytest.raises(DataError, match="empty"):
            fit(tiny_model, [], progress=False)

    @pytest.mark.slow
    @pytest.mark.acceptance
    def test_overfits_one_toy_reaction(self, toy_splits):
        record = toy_splits["train"][0]
        model = ReactionModel(ModelConfig.desk(batch_size=4))
        result = fit(model, [record], [record], max_iterations=2000, progress=False)
        assert result.best_precision == 1.0
