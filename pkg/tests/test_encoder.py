"""Message-passing encoder and atom-pair scoring.

Run with: pytest tests/test_encoder.py -v
"""

from __future__ import annotations

import numpy as np
import pytest

from bondedit.config import ModelConfig
from bondedit.errors import VocabularyError
from bondedit.gnn import EdgeList
from bondedit.model import ReactionModel
from bondedit.molgraph import BondType
from bondedit.pairnet import CandidateSet, TopKSet, select_top_k
from bondedit.smiles import parse_smiles
from bondedit.tape import take

from conftest import TINY_CONFIG

pytestmark = [pytest.mark.model]


def _encode(model: ReactionModel, smiles: str):
    g = parse_smiles(smiles)
    tape = model.new_tape(record=False)
    features, states = model.encoder.initial_states(tape, model.store, g)
    return g, tape, features, states


# =============================================================================
# Encoder
# =============================================================================


class TestEncoder:
    """Initial states, message passing and the post-edit refresh."""

    def test_edge_list_order(self):
        """Receivers ascend, then neighbours ascend within a receiver."""
        edges = EdgeList.of(parse_smiles("CC(O)N"))
        assert edges.receivers.tolist() == [0, 1, 1, 1, 2, 3]
        assert edges.neighbours.tolist() == [1, 0, 2, 3, 1, 1]
        assert edges.bond_types.tolist() == [int(BondType.SINGLE)] * 6

    def test_shapes(self, tiny_model, tiny_config):
        _, _, features, states = _encode(tiny_model, "CC(=O)O.[Na+]")
        assert features.shape == (5, tiny_config.feature_dim)
        assert states.shape == (5, tiny_config.state_dim)

    def test_atom_feature_vector_is_a_feature_row(self, tiny_model, tiny_config):
        g, tape, features, _ = _encode(tiny_model, "CC(=O)O")
        row = tiny_model.encoder.featurizer.atom_feature_vector(tape, tiny_model.store, g, 2)
        assert row.shape == (tiny_config.feature_dim,)
        np.testing.assert_array_equal(row.value, features.value[2])

    def test_isolated_atom_gets_zero_message(self, tiny_model, tiny_config):
        tape = tiny_model.new_tape(record=False)
        out = tiny_model.encoder.aggregate(tape, tape.constant(np.ones((1, tiny_config.state_dim))), np.array([0]), 2)
        np.testing.assert_array_equal(out.value[1], np.zeros(tiny_config.state_dim))
        np.testing.assert_array_equal(out.value[0], np.ones(tiny_config.state_dim))

    def test_permutation_equivariance(self, tiny_model, rng):
        g, _, _, states = _encode(tiny_model, "CC(=O)OCC.N")
        order = [int(i) for i in rng.permutation(len(g))]
        tape = tiny_model.new_tape(record=False)
        _, permuted = tiny_model.encoder.initial_states(tape, tiny_model.store, g.permuted(order))
        np.testing.assert_allclose(permuted.value, states.value[order], atol=1e-12)

    def test_zero_steps_is_the_init_layer(self, rng):
        model = ReactionModel(ModelConfig.desk(**{**TINY_CONFIG, "message_passing_steps": 0}))
        g, tape, features, states = _encode(model, "CCO")
        expected = model.encoder.init_node_states(tape, model.store, features)
        np.testing.assert_array_equal(states.value, expected.value)

    def test_refresh_after_edit(self, tiny_model):
        """Edited atoms are updated first, then every atom takes one more step."""
        g, tape, _, states = _encode(tiny_model, "CCO.C")
        edited = g.with_bond(2, 3, BondType.SINGLE)
        features, refreshed = tiny_model.encoder.refresh_after_edit(tape, tiny_model.store, edited, states, 2, 3)

        encoder, store = tiny_model.encoder, tiny_model.store
        full = encoder.step(tape, store, edited, states, features)
        mixed = states.value.copy()
        mixed[[2, 3]] = full.value[[2, 3]]
        expected = encoder.step(tape, store, edited, tape.constant(mixed), features)
        np.testing.assert_allclose(refreshed.value, expected.value, atol=1e-12)
        assert features.value[3, -5] > 0.0  # degree attribute followed the edit

    def test_element_outside_vocabulary(self, tiny_model):
        with pytest.raises(VocabularyError):
            _encode(tiny_model, "[He]C")


# =============================================================================
# Candidates and top-K
# =============================================================================


class TestTopK:
    """Masked selection with lexicographic tie-breaking."""

    def test_ties_go_to_the_lower_index(self):
        scores = np.array([1.0, 2.0, 2.0, 0.0])
        eligible = np.ones(4, dtype=bool)
        assert select_top_k(scores, eligible, 2) == [1, 2]
        assert select_top_k(scores, eligible, 3) == [1, 2, 0]

    def test_masked_pairs_never_selected(self):
        scores = np.array([5.0, 2.0, 9.0])
        assert select_top_k(scores, np.array([True, True, False]), 3) == [0, 1]

    def test_empty(self):
        assert select_top_k(np.array([1.0]), np.array([False]), 3) == []
        assert select_top_k(np.zeros(0), np.zeros(0, dtype=bool), 3) == []

    def test_candidate_universe(self, addition_record):
        g = addition_record.input_graph
        candidates = CandidateSet.of(g, consumed={(0, 1)})
        assert len(candidates) == 45
        assert candidates.pairs[:3] == ((0, 1), (0, 2), (0, 3))
        assert not candidates.eligible[candidates.index((0, 1))]
        assert not candidates.eligible[candidates.index((4, 5))]
        assert int(candidates.eligible.sum()) == 9
        assert candidates.bond_types[candidates.index((1, 2))] == int(BondType.DOUBLE)

    def test_reagents_kept_when_not_excluded(self, addition_record):
        candidates = CandidateSet.of(addition_record.input_graph, exclude_reagents=False)
        assert candidates.eligible.all()


# =============================================================================
# Pair scoring
# =============================================================================


class TestPairScoring:
    """Local and global scorers over the full candidate universe."""

    @pytest.mark.parametrize("network", ["local", "global"])
    def test_scores_every_pair(self, network, addition_record):
        model = ReactionModel(ModelConfig.desk(**{**TINY_CONFIG, "pair_network": network}))
        tape = model.new_tape(record=False)
        state = model.initial_state(tape, addition_record.input_graph)
        obs = model.observe(tape, state)
        assert obs.scored.scores.shape == (45,)
        assert obs.scored.reps.shape == (45, model.config.pair_hidden)
        assert len(obs.topk) == model.config.top_k
        assert all(p[1] < 5 for p in obs.topk.pairs)
        assert (obs.scored.attention is None) == (network == "local")

    def test_attention_rows_are_distributions(self, tiny_model, addition_record):
        tape = tiny_model.new_tape(record=False)
        obs = tiny_model.observe(tape, tiny_model.initial_state(tape, addition_record.input_graph))
        attention = obs.scored.attention
        assert attention.shape == (10, 10)
        np.testing.assert_allclose(attention.sum(axis=1), np.ones(10))

    def test_top_k_follows_scores(self, tiny_model, addition_record):
        tape = tiny_model.new_tape(record=False)
        obs = tiny_model.observe(tape, tiny_model.initial_state(tape, addition_record.input_graph))
        chosen = obs.scored.values[obs.topk.indices]
        assert list(chosen) == sorted(chosen, reverse=True)
        np.testing.assert_array_equal(obs.topk.scores.value, chosen)
        np.testing.assert_array_equal(obs.topk.reps.value, take(obs.scored.reps, obs.topk.indices).value)

    def test_reagent_bit_widens_node_inputs(self, addition_record):
        with_bit = ReactionModel(ModelConfig.desk(**TINY_CONFIG))
        without = ReactionModel(ModelConfig.desk(**{**TINY_CONFIG, "use_reagent_bit": False}))
        g = addition_record.input_graph
        for model, width in ((with_bit, TINY_CONFIG["state_dim"] + 1), (without, TINY_CONFIG["state_dim"])):
            tape = model.new_tape(record=False)
            state = model.initial_state(tape, g)
            x = model.scorer.node_inputs(tape, state.node_states, g)
            assert x.shape == (10, width)
        tape = with_bit.new_tape(record=False)
        x = with_bit.scorer.node_inputs(tape, with_bit.initial_state(tape, g).node_states, g)
        assert x.value[:, -1].tolist() == [0.0] * 5 + [1.0] * 5

    def test_pooled_rep_of_empty_set(self, tiny_model):
        tape = tiny_model.new_tape(record=False)
        pooled = tiny_model.scorer.pooled_rep(tape, tiny_model.store, TopKSet([], [], None, None))
        np.testing.assert_array_equal(pooled.value, np.zeros(tiny_model.config.pair_hidden))

    def test_single_atom_has_no_candidates(self, tiny_model):
        tape = tiny_model.new_tape(record=False)
        obs = tiny_model.observe(tape, tiny_model.initial_state(tape, parse_smiles("C")))
        assert obs.topk.empty
        assert not obs.can_continue
