"""Shared fixtures for the bondedit test suite.

Run with: pytest -v            (everything)
          pytest -m "not slow" (fast loop)
"""

from __future__ import annotations

import logging

import numpy as np
import pytest

from bondedit.config import ModelConfig, ToyTaskSpec
from bondedit.datasets import parse_reaction_smiles
from bondedit.gradcheck import load_fixture
from bondedit.model import ReactionModel
from bondedit.molgraph import MolGraph, ReactionRecord
from bondedit.smiles import parse_smiles
from bondedit.toydata import gen_toy_dataset

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

# Finite-difference step and tolerances
FD_STEP = 1e-5
PRIMITIVE_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-4

# Carbonyl addition: O:1=C:2 becomes single, C:2 bonds to C:10
ADDITION_REACTION = "[CH3:3][C:2](=[O:1])[CH3:4].[CH3-:10]>C1CCOC1>[CH3:3][C:2]([O-:1])([CH3:4])[CH3:10]"

# Esterification with a leaving hydroxyl
ESTER_REACTION = "[CH3:1][C:2](=[O:3])[OH:4].[OH:5][CH2:6][CH3:7]>ClCCl>[CH3:1][C:2](=[O:3])[O:5][CH2:6][CH3:7]"

BENZENE = "c1ccccc1"
KEKULE_BENZENE = "C1=CC=CC=C1"

# Small but complete architecture for fast tests
TINY_CONFIG: dict[str, object] = {
    "atom_embed_dim": 4,
    "bond_embed_dim": 3,
    "state_dim": 6,
    "message_passing_steps": 2,
    "pair_hidden": 6,
    "pair_score_hidden": 5,
    "gru_hidden": 6,
    "value_hidden": 5,
    "head_hidden": 5,
    "top_k": 4,
    "beam_width": 4,
    "max_steps": 3,
    "batch_size": 2,
    "eval_every": 5,
    "checkpoint_every": 5,
    "dtype": "float64",
}

# Beam/exhaustive comparison instances: small graphs, K=3, B=3, T=2
ORACLE_CONFIG: dict[str, object] = {**TINY_CONFIG, "top_k": 3, "num_bond_types": 3, "max_steps": 2}


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(autouse=True)
def _reset_package_logger():
    """Undo ``configure_logging`` from CLI tests so caplog sees every record."""
    yield
    root = logging.getLogger("bondedit")
    for handler in list(root.handlers):
        root.removeHandler(handler)
    root.setLevel(logging.NOTSET)
    root.propagate = True


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig.desk(**TINY_CONFIG)


@pytest.fixture
def tiny_model(tiny_config: ModelConfig) -> ReactionModel:
    return ReactionModel(tiny_config)


@pytest.fixture
def ester_record() -> ReactionRecord:
    """The bundled 10-atom esterification used by the gradient check."""
    return load_fixture()


@pytest.fixture
def addition_record() -> ReactionRecord:
    record = parse_reaction_smiles(ADDITION_REACTION, "addition")
    assert record is not None
    return record


@pytest.fixture
def benzene() -> MolGraph:
    return parse_smiles(BENZENE)


@pytest.fixture(scope="session")
def small_toy_spec() -> ToyTaskSpec:
    return ToyTaskSpec(min_nodes=4, max_nodes=6, num_labels=3, min_changes=1, max_changes=2, train_size=12, valid_size=4, test_size=4, seed=7)


@pytest.fixture(scope="session")
def toy_splits(small_toy_spec: ToyTaskSpec) -> dict[str, list[ReactionRecord]]:
    return gen_toy_dataset(small_toy_spec)
