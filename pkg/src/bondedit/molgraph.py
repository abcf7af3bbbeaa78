"""Molecular graph data model.

A ``MolGraph`` is an immutable labelled multi-component graph: an ordered
tuple of ``Atom`` values plus a symmetric bond store. Every edit returns a new
graph with the derived atom attributes (degree, explicit valence, ring
membership) recomputed, so graphs can be shared freely between beams,
episodes and worker threads.

Reaction bookkeeping lives here as well: deriving the gold edit set from
atom-map numbers, applying edits, hashing products for duplicate removal and
checking maximum valence.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace

import networkx as nx
import numpy as np

from bondedit.elements import SYMBOL, ValenceTable
from bondedit.errors import InvalidEditError, MappingError, NoOpEditError

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Bonds
# ---------------------------------------------------------------------------


class BondType(enum.IntEnum):
    """Bond labels. NULL means "no bond" and is never stored in a graph."""

    NULL = 0
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4

    @property
    def order(self) -> float:
        return _BOND_ORDER[self]

    @classmethod
    def parse(cls, value: str | int) -> BondType:
        if isinstance(value, int):
            return cls(value)
        try:
            return cls[value.upper()]
        except KeyError:
            msg = f"unknown bond type {value!r}"
            raise ValueError(msg) from None


_BOND_ORDER = {
    BondType.NULL: 0.0,
    BondType.SINGLE: 1.0,
    BondType.DOUBLE: 2.0,
    BondType.TRIPLE: 3.0,
    BondType.AROMATIC: 1.5,
}

Pair = tuple[int, int]


def canonical_pair(i: int, j: int) -> Pair:
    return (i, j) if i < j else (j, i)


# ---------------------------------------------------------------------------
# Data models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Atom:
    """An atom and its derived attributes.

    ``degree``, ``explicit_valence`` and ``in_ring`` are owned by the graph and
    recomputed on every edit; constructors may leave them at their defaults.
    """

    element: int
    charge: int = 0
    explicit_h_count: int = 0
    map_number: int | None = None
    is_reagent: bool = False
    degree: int = 0
    explicit_valence: int = 0
    in_ring: bool = False

    @property
    def symbol(self) -> str:
        return SYMBOL.get(self.element, "?")


@dataclass(frozen=True, eq=False)
class MolGraph:
    """Immutable molecular graph.

    ``bonds`` maps canonical pairs ``(i, j)`` with ``i < j`` to a non-NULL
    ``BondType``. Use ``MolGraph.build`` to construct one; it validates the
    bond store and fills in derived atom attributes.
    """

    atoms: tuple[Atom, ...]
    bonds: Mapping[Pair, BondType]
    _neighbors: tuple[tuple[int, ...], ...] = field(repr=False, compare=False)

    @classmethod
    def build(cls, atoms: Iterable[Atom], bonds: Mapping[Pair, BondType] | Iterable[tuple[int, int, BondType]]) -> MolGraph:
        atoms = tuple(atoms)
        store: dict[Pair, BondType] = {}
        items = bonds.items() if isinstance(bonds, Mapping) else (((i, j), b) for i, j, b in bonds)
        n = len(atoms)
        for (i, j), bond in items:
            bond = BondType(bond)
            if i == j:
                msg = f"self-loop on atom {i}"
                raise InvalidEditError(msg)
            if not (0 <= i < n and 0 <= j < n):
                msg = f"bond ({i}, {j}) references a missing atom (graph has {n})"
                raise InvalidEditError(msg)
            if bond is BondType.NULL:
                continue
            store[canonical_pair(i, j)] = bond
        return cls._with_derived(atoms, store)

    @classmethod
    def empty(cls) -> MolGraph:
        return cls._with_derived((), {})

    @classmethod
    def _with_derived(cls, atoms: tuple[Atom, ...], store: dict[Pair, BondType]) -> MolGraph:
        n = len(atoms)
        adjacency: list[list[int]] = [[] for _ in range(n)]
        order_sum = [0.0] * n
        for (i, j), bond in store.items():
            adjacency[i].append(j)
            adjacency[j].append(i)
            order_sum[i] += bond.order
            order_sum[j] += bond.order
        ring_atoms = _ring_atoms(n, store)
        derived = tuple(
            replace(
                atom,
                degree=len(adjacency[i]),
                explicit_valence=int(math.floor(order_sum[i])) + atom.explicit_h_count,
                in_ring=i in ring_atoms,
            )
            for i, atom in enumerate(atoms)
        )
        neighbors = tuple(tuple(sorted(adj)) for adj in adjacency)
        return cls(atoms=derived, bonds=dict(sorted(store.items())), _neighbors=neighbors)

    # ─── Queries ─────────────────────────────────────────────────────

    def __len__(self) -> int:
        return len(self.atoms)

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)

    def bond(self, i: int, j: int) -> BondType:
        return self.bonds.get(canonical_pair(i, j), BondType.NULL)

    def neighbors(self, i: int) -> tuple[int, ...]:
        """Neighbour ids of atom ``i`` in ascending order."""
        return self._neighbors[i]

    def bond_order_sum(self, i: int) -> float:
        return sum(self.bond(i, j).order for j in self._neighbors[i])

    def components(self) -> list[list[int]]:
        """Connected components as sorted atom-id lists, ordered by smallest id."""
        comps = [sorted(c) for c in nx.connected_components(self.to_networkx())]
        return sorted(comps, key=lambda c: c[0])

    def reagent_atoms(self) -> frozenset[int]:
        return frozenset(i for i, a in enumerate(self.atoms) if a.is_reagent)

    def map_index(self) -> dict[int, int]:
        """Map number -> atom id; raises on duplicates."""
        index: dict[int, int] = {}
        for i, atom in enumerate(self.atoms):
            if atom.map_number is None:
                continue
            if atom.map_number in index:
                msg = f"duplicate atom map number {atom.map_number}"
                raise MappingError(msg)
            index[atom.map_number] = i
        return index

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(len(self.atoms)))
        g.add_edges_from(self.bonds)
        return g

    # ─── Derived graphs ──────────────────────────────────────────────

    def with_bond(self, i: int, j: int, bond: BondType) -> MolGraph:
        store = dict(self.bonds)
        pair = canonical_pair(i, j)
        if bond is BondType.NULL:
            store.pop(pair, None)
        else:
            store[pair] = bond
        return MolGraph._with_derived(self.atoms, store)

    def with_atoms(self, atoms: Iterable[Atom]) -> MolGraph:
        return MolGraph._with_derived(tuple(atoms), dict(self.bonds))

    def subgraph(self, keep: Iterable[int]) -> MolGraph:
        """Induced subgraph over ``keep`` (renumbered in ascending order)."""
        kept = sorted(set(keep))
        remap = {old: new for new, old in enumerate(kept)}
        store = {
            canonical_pair(remap[i], remap[j]): b
            for (i, j), b in self.bonds.items()
            if i in remap and j in remap
        }
        return MolGraph._with_derived(tuple(self.atoms[i] for i in kept), store)

    def permuted(self, order: list[int]) -> MolGraph:
        """Graph whose atom ``k`` is this graph's atom ``order[k]``."""
        position = {old: new for new, old in enumerate(order)}
        store = {canonical_pair(position[i], position[j]): b for (i, j), b in self.bonds.items()}
        return MolGraph._with_derived(tuple(self.atoms[i] for i in order), store)


def _ring_atoms(n: int, store: Mapping[Pair, BondType]) -> set[int]:
    """Atoms incident to at least one non-bridge bond."""
    if not store:
        return set()
    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from(store)
    bridges = {canonical_pair(i, j) for i, j in nx.bridges(g)}
    ring: set[int] = set()
    for pair in store:
        if pair not in bridges:
            ring.update(pair)
    return ring


@dataclass(frozen=True, order=True)
class ReactionTriple:
    """One bond edit: set the bond between ``u`` and ``v`` to ``new_bond``."""

    u: int
    v: int
    new_bond: BondType

    def __post_init__(self) -> None:
        if self.u >= self.v:
            msg = f"reaction triple requires u < v, got ({self.u}, {self.v})"
            raise InvalidEditError(msg)

    @classmethod
    def of(cls, i: int, j: int, new_bond: BondType) -> ReactionTriple:
        u, v = canonical_pair(i, j)
        return cls(u, v, BondType(new_bond))

    @property
    def pair(self) -> Pair:
        return (self.u, self.v)


@dataclass(frozen=True, eq=False)
class ReactionRecord:
    """Reactants plus reagents, the recorded products and the gold edit set."""

    input_graph: MolGraph
    product_graph: MolGraph
    gold_triples: frozenset[ReactionTriple]
    record_id: str = ""

    @property
    def gold_pairs(self) -> frozenset[Pair]:
        return frozenset(t.pair for t in self.gold_triples)

    def gold_bond(self, pair: Pair) -> BondType | None:
        for t in self.gold_triples:
            if t.pair == pair:
                return t.new_bond
        return None

    @property
    def num_changes(self) -> int:
        return len(self.gold_triples)


# ---------------------------------------------------------------------------
# Edits
# ---------------------------------------------------------------------------


def apply_triple(g: MolGraph, t: ReactionTriple) -> MolGraph:
    """Return ``g`` with the bond of ``t.pair`` replaced by ``t.new_bond``.

    No valence check is made; intermediate graphs may be chemically invalid.
    """
    n = len(g)
    if not (0 <= t.u < n and 0 <= t.v < n):
        msg = f"edit ({t.u}, {t.v}) references a missing atom (graph has {n})"
        raise InvalidEditError(msg)
    if g.bond(t.u, t.v) is t.new_bond:
        msg = f"edit ({t.u}, {t.v}) -> {t.new_bond.name} leaves the bond unchanged"
        raise NoOpEditError(msg)
    return g.with_bond(t.u, t.v, t.new_bond)


def apply_all(g: MolGraph, triples: Iterable[ReactionTriple]) -> MolGraph:
    for t in triples:
        g = apply_triple(g, t)
    return g


def extract_triples(input_graph: MolGraph, product: MolGraph) -> frozenset[ReactionTriple]:
    """Derive the edit set that turns ``input_graph`` into ``product``.

    Atoms correspond through map numbers. Pairs with both atoms in the product
    contribute a triple when their bond differs. A bonded pair with exactly one
    atom in the product contributes a NULL triple (the other side leaves).
    Pairs with no atom in the product are ignored.
    """
    in_index = input_graph.map_index()
    prod_index = product.map_index()
    for i, atom in enumerate(product.atoms):
        if atom.map_number is None or atom.map_number not in in_index:
            msg = f"product atom {i} ({atom.symbol}) has no mapped counterpart in the input"
            raise MappingError(msg)

    # input atom id -> product atom id
    to_product = {in_index[m]: p for m, p in prod_index.items()}
    triples: set[ReactionTriple] = set()

    for (i, j), bond in input_graph.bonds.items():
        pi, pj = to_product.get(i), to_product.get(j)
        if pi is None and pj is None:
            continue
        if pi is None or pj is None:
            triples.add(ReactionTriple.of(i, j, BondType.NULL))
            continue
        new = product.bond(pi, pj)
        if new is not bond:
            triples.add(ReactionTriple.of(i, j, new))

    back = {p: i for i, p in to_product.items()}
    for (pi, pj), bond in product.bonds.items():
        i, j = back[pi], back[pj]
        if input_graph.bond(i, j) is BondType.NULL:
            triples.add(ReactionTriple.of(i, j, bond))
    return frozenset(triples)


def rebalance_hydrogens(before: MolGraph, after: MolGraph) -> MolGraph:
    """Consume explicit hydrogens on atoms whose bond order grew.

    Forming a bond on an atom that carries explicit hydrogens takes one of
    them per unit of added bond order; the count never goes below zero.
    Atoms whose bond order shrank keep their count.
    """
    atoms = []
    changed = False
    for i, atom in enumerate(after.atoms):
        gained = after.bond_order_sum(i) - before.bond_order_sum(i)
        take = min(atom.explicit_h_count, int(math.floor(gained))) if gained > 0 else 0
        if take > 0:
            atoms.append(replace(atom, explicit_h_count=atom.explicit_h_count - take))
            changed = True
        else:
            atoms.append(atom)
    return after.with_atoms(atoms) if changed else after


# ---------------------------------------------------------------------------
# Hashing and validity
# ---------------------------------------------------------------------------


def canonical_hash(g: MolGraph, use_maps: bool = False) -> str:
    """Permutation-invariant digest via Weisfeiler-Lehman colour refinement.

    Seeds are (element, charge, explicit H count[, map number]); bond types
    label the edges; the number of refinement rounds equals the atom count.
    WL cannot separate every non-isomorphic pair (e.g. some regular graphs),
    so equal digests are strong but not conclusive evidence of isomorphism.
    """
    if len(g) == 0:
        return hashlib.blake2b(b"empty-graph", digest_size=16).hexdigest()
    nxg = nx.Graph()
    for i, atom in enumerate(g.atoms):
        seed = f"{atom.element},{atom.charge},{atom.explicit_h_count}"
        if use_maps:
            seed += f",{atom.map_number if atom.map_number is not None else '-'}"
        nxg.add_node(i, label=seed)
    for (i, j), bond in g.bonds.items():
        nxg.add_edge(i, j, bond=bond.name)
    return nx.weisfeiler_lehman_graph_hash(
        nxg, node_attr="label", edge_attr="bond", iterations=len(g), digest_size=16
    )


@dataclass(frozen=True)
class ValenceViolation:
    atom: int
    element: int
    total: float
    limit: int

    def __str__(self) -> str:
        return f"atom {self.atom} ({SYMBOL.get(self.element, '?')}): valence {self.total:g} > {self.limit}"


_DEFAULT_VALENCE = ValenceTable()


def validate_valence(g: MolGraph, table: ValenceTable | None = None) -> list[ValenceViolation]:
    """One violation per atom whose bond orders plus explicit Hs exceed its limit.

    Aromatic bonds count 1.5 and the sum is compared unrounded, so a
    ring-fusion atom with three aromatic bonds (4.5) exceeds a limit of 4.
    """
    table = table or _DEFAULT_VALENCE
    violations = []
    for i, atom in enumerate(g.atoms):
        limit = table.max_valence(atom.element, atom.charge)
        if limit is None:
            continue
        total = g.bond_order_sum(i) + atom.explicit_h_count
        if total > limit:
            violations.append(ValenceViolation(i, atom.element, total, limit))
    return violations


# ---------------------------------------------------------------------------
# Atom attributes
# ---------------------------------------------------------------------------

NUM_ATOM_ATTRIBUTES = 5

# Ranges used to scale each attribute into [0, 1].
_MAX_DEGREE = 6.0
_MAX_VALENCE = 8.0
_MAX_HS = 4.0
_CHARGE_SPAN = 3.0


def atom_attributes(g: MolGraph, i: int) -> np.ndarray:
    """Degree, explicit valence, explicit Hs, charge and ring flag, scaled to [0, 1]."""
    atom = g.atoms[i]
    raw = np.array(
        [
            atom.degree / _MAX_DEGREE,
            atom.explicit_valence / _MAX_VALENCE,
            atom.explicit_h_count / _MAX_HS,
            (atom.charge + _CHARGE_SPAN) / (2 * _CHARGE_SPAN),
            1.0 if atom.in_ring else 0.0,
        ],
        dtype=np.float64,
    )
    return np.clip(raw, 0.0, 1.0)


def attribute_matrix(g: MolGraph) -> np.ndarray:
    if len(g) == 0:
        return np.zeros((0, NUM_ATOM_ATTRIBUTES))
    return np.stack([atom_attributes(g, i) for i in range(len(g))])
