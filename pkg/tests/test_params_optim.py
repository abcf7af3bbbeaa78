"""Parameter store, Adam, the plateau schedule and checkpoints.

Run with: pytest tests/test_params_optim.py -v
"""

from __future__ import annotations

import json
import math

import numpy as np
import pytest

from bondedit.config import ModelConfig
from bondedit.errors import CheckpointError, ShapeError
from bondedit.model import ReactionModel
from bondedit.optim import AdamSettings, PlateauSchedule, adam_step, plateau_schedule
from bondedit.params import ParamStore, load_checkpoint, save_checkpoint

from conftest import TINY_CONFIG

pytestmark = [pytest.mark.numerics]


@pytest.fixture
def store(rng):
    store = ParamStore()
    store.add("layer.W", (4, 6), rng)
    store.add("layer.b", (6,), rng)
    return store


# =============================================================================
# ParamStore
# =============================================================================


class TestParamStore:
    """Initialisation and bookkeeping."""

    def test_glorot_bounds(self, store):
        limit = math.sqrt(6.0 / (4 + 6))
        w = store.value("layer.W")
        assert np.abs(w).max() <= limit
        assert np.abs(w).max() > 0.0
        assert not store.value("layer.b").any()

    def test_names_are_sorted(self, store):
        assert store.names() == ["layer.W", "layer.b"]
        assert store.num_parameters() == 30

    def test_duplicate_name(self, store, rng):
        with pytest.raises(ValueError, match="duplicate"):
            store.add("layer.b", (6,), rng)

    def test_set_value_copies(self, store):
        value = np.ones(6)
        store.set_value("layer.b", value)
        value[0] = 5.0
        assert store.value("layer.b")[0] == 1.0

    def test_shape_checks(self, store):
        with pytest.raises(ShapeError):
            store.set_value("layer.b", np.ones(5))
        with pytest.raises(ShapeError):
            store.accumulate("layer.b", np.ones(5))

    def test_same_seed_same_values(self):
        a = ReactionModel(ModelConfig.desk(**TINY_CONFIG))
        b = ReactionModel(ModelConfig.desk(**TINY_CONFIG))
        for name in a.store.names():
            np.testing.assert_array_equal(a.store.value(name), b.store.value(name))


# =============================================================================
# Adam
# =============================================================================


class TestAdam:
    """Bias-corrected Adam against a hand computation."""

    def test_two_steps(self):
        store = ParamStore()
        store.add("x", (2,), np.random.default_rng(0))
        lr, settings = 0.1, AdamSettings()
        b1, b2, eps = settings.beta1, settings.beta2, settings.eps
        g1, g2 = np.array([0.5, -2.0]), np.array([1.0, 1.0])

        store.accumulate("x", g1)
        adam_step(store, lr, settings)
        expected = -lr * g1 / (np.abs(g1) + eps)
        np.testing.assert_allclose(store.value("x"), expected, rtol=1e-12)
        assert store.step == 1
        assert not store.grad("x").any()

        store.accumulate("x", g2)
        adam_step(store, lr, settings)
        m = b1 * (1 - b1) * g1 + (1 - b1) * g2
        v = b2 * (1 - b2) * g1**2 + (1 - b2) * g2**2
        m_hat, v_hat = m / (1 - b1**2), v / (1 - b2**2)
        expected = expected - lr * m_hat / (np.sqrt(v_hat) + eps)
        np.testing.assert_allclose(store.value("x"), expected, rtol=1e-12)

    def test_zero_gradient_leaves_parameter(self, store):
        before = store.snapshot()
        adam_step(store, 0.1)
        for name, value in before.items():
            np.testing.assert_array_equal(store.value(name), value)


# =============================================================================
# Plateau schedule
# =============================================================================


class TestPlateauSchedule:
    """Learning-rate decay on a maximised validation metric."""

    def test_decay_after_patience(self):
        schedule = PlateauSchedule(1.0, 0.5, patience=2, min_lr=0.1)
        assert [schedule.update(m) for m in (0.5, 0.4, 0.4, 0.3, 0.3)] == [1.0, 1.0, 0.5, 0.5, 0.25]

    def test_improvement_on_the_boundary_resets(self):
        schedule = PlateauSchedule(1.0, 0.5, patience=2, min_lr=0.1)
        assert [schedule.update(m) for m in (0.5, 0.4, 0.6, 0.6)] == [1.0, 1.0, 1.0, 1.0]
        assert schedule.bad_evaluations == 1

    def test_floor(self):
        assert plateau_schedule([0.2] * 10) == 5e-5

    def test_profiles(self):
        small = PlateauSchedule.from_profile("small", 0.001, eval_every=100)
        large = PlateauSchedule.from_profile("large", 0.001, eval_every=100)
        assert (small.factor, small.patience, small.min_lr) == (0.5, 10, 5e-5)
        assert (large.factor, large.patience, large.min_lr) == (0.8, 5, 2e-5)

    def test_state_round_trip(self):
        schedule = PlateauSchedule(1.0, 0.5, patience=3, min_lr=0.1)
        for m in (0.5, 0.2):
            schedule.update(m)
        again = PlateauSchedule(0.0, 0.0, 1, 0.0)
        again.load_state(schedule.state_dict())
        assert again.state_dict() == schedule.state_dict()


# =============================================================================
# Checkpoints
# =============================================================================


class TestCheckpoints:
    """JSON checkpoints: byte stability and header checks."""

    def test_save_load_save_is_byte_identical(self, tmp_path, store):
        store.accumulate("layer.b", np.arange(6.0))
        adam_step(store, 0.01)
        first, second = tmp_path / "a.json", tmp_path / "b.json"
        save_checkpoint(first, store, "hash", {"iteration": 3})
        loaded, state, header = load_checkpoint(first, expected_hash="hash")
        save_checkpoint(second, loaded, "hash", state)
        assert first.read_bytes() == second.read_bytes()
        assert (state, header.step) == ({"iteration": 3}, 1)

    def test_hash_mismatch(self, tmp_path, store):
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, store, "abc")
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(path, expected_hash="xyz")

    def test_version_mismatch(self, tmp_path, store):
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, store, "abc")
        raw = json.loads(path.read_text(encoding="utf-8"))
        raw["header"]["version"] = 99
        path.write_text(json.dumps(raw), encoding="utf-8")
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_missing_tensor(self, tmp_path, store):
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, store, "abc")
        with pytest.raises(CheckpointError, match="layer.extra"):
            load_checkpoint(path, names=["layer.W", "layer.extra"])

    def test_unreadable(self, tmp_path):
        path = tmp_path / "ckpt.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "absent.json")

    def test_model_round_trip(self, tmp_path, tiny_model):
        path = tmp_path / "model.json"
        tiny_model.save(path, {"iteration": 7})
        model, state = ReactionModel.load(path)
        assert state["iteration"] == 7
        assert model.config == tiny_model.config
        for name in tiny_model.store.names():
            np.testing.assert_array_equal(model.store.value(name), tiny_model.store.value(name))

    def test_model_with_other_architecture(self, tmp_path, tiny_model):
        path = tmp_path / "model.json"
        tiny_model.save(path)
        with pytest.raises(CheckpointError, match="hash"):
            ReactionModel.load(path, ModelConfig.desk(**{**TINY_CONFIG, "state_dim": 7}))
