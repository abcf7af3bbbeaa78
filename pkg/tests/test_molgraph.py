"""Molecular graph model: edits, edit extraction, hashing and valence.

Run with: pytest tests/test_molgraph.py -v
"""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from bondedit.config import ToyTaskSpec
from bondedit.errors import InvalidEditError, MappingError, NoOpEditError
from bondedit.molgraph import (
    Atom,
    BondType,
    MolGraph,
    ReactionTriple,
    apply_all,
    apply_triple,
    attribute_matrix,
    canonical_hash,
    extract_triples,
    rebalance_hydrogens,
    validate_valence,
)
from bondedit.smiles import parse_smiles
from bondedit.toydata import random_graph

from conftest import KEKULE_BENZENE

pytestmark = [pytest.mark.graph]

CARBON = 6

# new bonds tried by the exhaustive round trip
EDIT_BONDS = (BondType.NULL, BondType.SINGLE, BondType.DOUBLE)


def _mapped_carbons(n: int) -> list[Atom]:
    return [Atom(element=CARBON, map_number=k + 1) for k in range(n)]


def _edit_sets(g: MolGraph, size: int):
    pairs = [(i, j) for i in range(len(g)) for j in range(i + 1, len(g))]
    for chosen in itertools.combinations(pairs, size):
        options = [[b for b in EDIT_BONDS if b is not g.bond(*p)] for p in chosen]
        for bonds in itertools.product(*options):
            yield [ReactionTriple.of(u, v, b) for (u, v), b in zip(chosen, bonds, strict=True)]


# =============================================================================
# Construction and queries
# =============================================================================


class TestMolGraph:
    """Graph construction and the derived atom attributes."""

    def test_ethane(self):
        """Two carbons, one single bond, degree 1 each."""
        g = parse_smiles("CC")
        assert len(g) == 2
        assert g.bond(0, 1) is BondType.SINGLE
        assert g.bond(1, 0) is BondType.SINGLE
        assert [a.degree for a in g.atoms] == [1, 1]

    def test_mapped_methanol(self):
        """Bracket atoms carry explicit hydrogens and map numbers into the atoms."""
        g = parse_smiles("[CH3:1][OH:2]")
        c, o = g.atoms
        assert (c.symbol, c.explicit_h_count, c.map_number) == ("C", 3, 1)
        assert (o.symbol, o.explicit_h_count, o.map_number) == ("O", 1, 2)
        assert c.explicit_valence == 4
        assert g.map_index() == {1: 0, 2: 1}

    def test_benzene_ring_membership(self, benzene):
        """Every benzene atom sits on the ring; none of ethane's do."""
        assert all(a.in_ring for a in benzene.atoms)
        assert all(b is BondType.AROMATIC for b in benzene.bonds.values())
        assert not any(a.in_ring for a in parse_smiles("CC").atoms)

    def test_components_are_sorted(self):
        g = parse_smiles("O.CC")
        assert g.components() == [[0], [1, 2]]

    def test_subgraph_renumbers(self):
        """Kept atoms are renumbered in ascending order and keep their bonds."""
        g = parse_smiles("CCO.N")
        sub = g.subgraph([1, 2])
        assert [a.symbol for a in sub.atoms] == ["C", "O"]
        assert sub.bonds == {(0, 1): BondType.SINGLE}

    def test_null_bond_is_never_stored(self):
        g = MolGraph.build(_mapped_carbons(2), {(0, 1): BondType.NULL})
        assert g.bonds == {}

    def test_self_loop_rejected(self):
        with pytest.raises(InvalidEditError):
            MolGraph.build(_mapped_carbons(2), {(1, 1): BondType.SINGLE})

    def test_duplicate_map_numbers_rejected(self):
        g = parse_smiles("[CH3:1][OH:1]")
        with pytest.raises(MappingError):
            g.map_index()

    def test_attribute_matrix_is_scaled(self):
        """Degree, valence, hydrogens, charge and ring flag, each within [0, 1]."""
        attrs = attribute_matrix(parse_smiles("CC"))
        assert attrs.shape == (2, 5)
        np.testing.assert_allclose(attrs[0], [1 / 6, 1 / 8, 0.0, 0.5, 0.0])
        assert attrs.min() >= 0.0
        assert attrs.max() <= 1.0

    def test_empty_graph_attributes(self):
        assert attribute_matrix(MolGraph.empty()).shape == (0, 5)


# =============================================================================
# Edits
# =============================================================================


class TestEdits:
    """apply_triple and its refusal of degenerate edits."""

    def test_form_bond(self):
        g = parse_smiles("C.O")
        out = apply_triple(g, ReactionTriple(0, 1, BondType.SINGLE))
        assert out.bond(0, 1) is BondType.SINGLE
        assert g.bond(0, 1) is BondType.NULL

    def test_break_bond(self):
        out = apply_triple(parse_smiles("CO"), ReactionTriple(0, 1, BondType.NULL))
        assert out.bonds == {}
        assert out.components() == [[0], [1]]

    def test_unchanged_bond_is_a_noop_error(self):
        with pytest.raises(NoOpEditError):
            apply_triple(parse_smiles("CC"), ReactionTriple(0, 1, BondType.SINGLE))

    def test_triple_requires_ordered_pair(self):
        with pytest.raises(InvalidEditError):
            ReactionTriple(2, 1, BondType.SINGLE)
        assert ReactionTriple.of(2, 1, BondType.SINGLE).pair == (1, 2)

    def test_missing_atom(self):
        with pytest.raises(InvalidEditError):
            apply_triple(parse_smiles("CC"), ReactionTriple(0, 5, BondType.SINGLE))

    def test_rebalance_consumes_hydrogens(self):
        """A new bond takes one hydrogen from each end; a break gives none back."""
        before = parse_smiles("[CH4:1].[OH2:2]")
        after = rebalance_hydrogens(before, before.with_bond(0, 1, BondType.SINGLE))
        assert [a.explicit_h_count for a in after.atoms] == [3, 1]
        broken = rebalance_hydrogens(after, after.with_bond(0, 1, BondType.NULL))
        assert [a.explicit_h_count for a in broken.atoms] == [3, 1]

    def test_rebalance_never_goes_negative(self):
        before = parse_smiles("C.O")
        after = rebalance_hydrogens(before, before.with_bond(0, 1, BondType.DOUBLE))
        assert [a.explicit_h_count for a in after.atoms] == [0, 0]


# =============================================================================
# Edit extraction
# =============================================================================


class TestExtractTriples:
    """Gold edit sets derived from atom maps."""

    def test_addition(self, addition_record):
        """Carbonyl addition: C=O becomes single, the methyl attacks the carbonyl carbon."""
        assert addition_record.gold_triples == frozenset(
            {ReactionTriple(1, 2, BondType.SINGLE), ReactionTriple(1, 4, BondType.SINGLE)}
        )
        assert addition_record.num_changes == 2
        assert addition_record.input_graph.reagent_atoms() == frozenset(range(5, 10))

    def test_leaving_atom_gives_null_triple(self):
        """A bonded atom absent from the product breaks its bond to the product side."""
        reactant = parse_smiles("[CH3:1][Cl:2]")
        product = parse_smiles("[CH3:1]")
        assert extract_triples(reactant, product) == frozenset({ReactionTriple(0, 1, BondType.NULL)})

    def test_unmapped_product_atom(self):
        with pytest.raises(MappingError):
            extract_triples(parse_smiles("[CH3:1][OH:2]"), parse_smiles("[CH3:1]O"))

    def test_no_reaction(self):
        g = parse_smiles("[CH3:1][OH:2]")
        assert extract_triples(g, g) == frozenset()

    @pytest.mark.slow
    @pytest.mark.acceptance
    def test_round_trip_seeded(self):
        """1,000 random graphs with random edit sets survive apply -> extract."""
        rng = np.random.default_rng(2024)
        spec = ToyTaskSpec(min_nodes=3, max_nodes=9, num_labels=6)
        for _ in range(1000):
            g, _ = random_graph(rng, spec)
            size = int(rng.integers(0, 4))
            pairs = [(i, j) for i in range(len(g)) for j in range(i + 1, len(g))]
            chosen = [pairs[int(k)] for k in rng.choice(len(pairs), size=min(size, len(pairs)), replace=False)]
            edits = []
            for u, v in chosen:
                options = [b for b in EDIT_BONDS if b is not g.bond(u, v)]
                edits.append(ReactionTriple(u, v, options[int(rng.integers(len(options)))]))
            assert extract_triples(g, apply_all(g, edits)) == frozenset(edits)

    @pytest.mark.slow
    @pytest.mark.acceptance
    def test_round_trip_exhaustive(self):
        """Every graph on up to 5 atoms with every edit set of size 1 or 2."""
        for n in range(2, 6):
            pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
            for mask in range(1 << len(pairs)):
                bonds = {p: BondType.SINGLE for k, p in enumerate(pairs) if mask >> k & 1}
                g = MolGraph.build(_mapped_carbons(n), bonds)
                for size in (1, 2):
                    for edits in _edit_sets(g, size):
                        assert extract_triples(g, apply_all(g, edits)) == frozenset(edits)


# =============================================================================
# Hashing and valence
# =============================================================================


class TestCanonicalHash:
    """Permutation-invariant digests."""

    def test_permutation_invariant(self, rng):
        g = parse_smiles("CC(=O)OCC.N")
        for _ in range(5):
            order = [int(i) for i in rng.permutation(len(g))]
            assert canonical_hash(g.permuted(order)) == canonical_hash(g)

    def test_bond_type_matters(self, benzene):
        assert canonical_hash(parse_smiles(KEKULE_BENZENE)) != canonical_hash(benzene)

    def test_maps_only_count_when_asked(self):
        a = parse_smiles("[CH3:1][OH:2]")
        b = parse_smiles("[CH3:7][OH:9]")
        assert canonical_hash(a) == canonical_hash(b)
        assert canonical_hash(a, use_maps=True) != canonical_hash(b, use_maps=True)

    def test_empty_graph(self):
        assert canonical_hash(MolGraph.empty()) == canonical_hash(parse_smiles(""))


class TestValence:
    """Maximum-valence checks, charge adjusted."""

    def test_pentavalent_carbon(self):
        violations = validate_valence(parse_smiles("C(C)(C)(C)(C)C"))
        assert [v.atom for v in violations] == [0]
        assert "valence 5 > 4" in str(violations[0])

    def test_ammonium_is_valid(self):
        assert validate_valence(parse_smiles("[NH4+]")) == []

    def test_negative_oxygen_allows_one_bond(self):
        assert validate_valence(parse_smiles("C[O-]")) == []
        assert len(validate_valence(parse_smiles("C[OH-]"))) == 1

    def test_benzene_is_valid(self, benzene):
        assert validate_valence(benzene) == []

    def test_fused_aromatic_atoms_exceed_the_limit(self):
        """Ring-fusion atoms carry three aromatic bonds: 4.5 against a limit of 4."""
        violations = validate_valence(parse_smiles("c1ccc2ccccc2c1"))
        assert [v.atom for v in violations] == [3, 8]
        assert all(v.total == 4.5 for v in violations)
        assert "valence 4.5 > 4" in str(violations[0])

    def test_unknown_elements_are_unconstrained(self):
        assert validate_valence(parse_smiles("[Pt](Cl)(Cl)(Cl)(Cl)(Cl)Cl")) == []
