"""Message-passing encoder.

Node states start as ``relu(W v_i + b)`` over the fixed atom features ``v_i``
(learned element embedding plus five scaled attributes). Each step computes a
message per directed edge from ``[x_i, x_j, e_ij]``, averages the messages of
each node's neighbours (an isolated node gets a zero vector) and feeds
``[x_i, m_i, v_i]`` through a highway layer. All nodes are updated
synchronously from the previous step's states; parameters are shared across
steps.

Work is vectorised per directed edge. Edge lists are ordered by receiver and
then by neighbour id, so the averaging sums neighbours in ascending id order.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from bondedit.config import ModelConfig
from bondedit.elements import VOCABULARY_SIZE, vocabulary_index
from bondedit.layers import Dense, Highway
from bondedit.molgraph import NUM_ATOM_ATTRIBUTES, BondType, MolGraph, attribute_matrix
from bondedit.params import ParamStore
from bondedit.tape import Tape, Tensor, concat, matmul, relu, take

BOND_VOCABULARY = len(BondType)


@dataclass(frozen=True)
class EdgeList:
    """Directed edges ``receiver <- neighbour`` with their bond types."""

    receivers: np.ndarray
    neighbours: np.ndarray
    bond_types: np.ndarray

    def __len__(self) -> int:
        return len(self.receivers)

    @classmethod
    def of(cls, g: MolGraph, receivers: Iterable[int] | None = None) -> EdgeList:
        nodes = range(len(g)) if receivers is None else sorted(set(receivers))
        recv, nbr, types = [], [], []
        for i in nodes:
            for j in g.neighbors(i):
                recv.append(i)
                nbr.append(j)
                types.append(int(g.bond(i, j)))
        return cls(
            np.asarray(recv, dtype=np.intp),
            np.asarray(nbr, dtype=np.intp),
            np.asarray(types, dtype=np.intp),
        )


class AtomFeaturizer:
    """Fixed per-atom features: element embedding concatenated with the scaled attributes."""

    def __init__(self, config: ModelConfig) -> None:
        self.embed_dim = config.atom_embed_dim

    @property
    def width(self) -> int:
        return self.embed_dim + NUM_ATOM_ATTRIBUTES

    def register(self, store: ParamStore, rng: np.random.Generator) -> None:
        store.add("atom.embed", (VOCABULARY_SIZE, self.embed_dim), rng)

    def atom_feature_vector(self, tape: Tape, store: ParamStore, g: MolGraph, i: int) -> Tensor:
        return self.features(tape, store, g)[i]

    def features(self, tape: Tape, store: ParamStore, g: MolGraph) -> Tensor:
        """``(n, embed_dim + 5)`` matrix; recomputed from ``g`` so attributes follow edits."""
        rows = [vocabulary_index(atom.element) for atom in g.atoms]
        embedded = take(tape.param(store, "atom.embed"), rows)
        return concat([embedded, tape.constant(attribute_matrix(g))], axis=1)


class GraphEncoder:
    def __init__(self, config: ModelConfig) -> None:
        self.config = config
        self.featurizer = AtomFeaturizer(config)
        d, f, eb = config.state_dim, self.featurizer.width, config.bond_embed_dim
        self.init_layer = Dense("gnn.init", f, d)
        self.message_layer = Dense("gnn.message", 2 * d + eb, d)
        self.highway = Highway("gnn.highway", 2 * d + f, d)

    def register(self, store: ParamStore, rng: np.random.Generator) -> None:
        self.featurizer.register(store, rng)
        store.add("bond.embed", (BOND_VOCABULARY, self.config.bond_embed_dim), rng)
        self.init_layer.register(store, rng)
        self.message_layer.register(store, rng)
        self.highway.register(store, rng)

    # ─── Pieces ──────────────────────────────────────────────────────

    def bond_embedding(self, tape: Tape, store: ParamStore, types: Sequence[int] | np.ndarray) -> Tensor:
        return take(tape.param(store, "bond.embed"), np.asarray(types, dtype=np.intp))

    def init_node_states(
        self,
        tape: Tape,
        store: ParamStore,
        features: Tensor,
        activation: Callable[[Tensor], Tensor] = relu,
    ) -> Tensor:
        return activation(self.init_layer(tape, store, features))

    def message(self, tape: Tape, store: ParamStore, x_recv: Tensor, x_nbr: Tensor, e: Tensor) -> Tensor:
        """``relu(W [x_i, x_j, e_ij] + b)``; rows are directed edges (or a single edge)."""
        return relu(self.message_layer(tape, store, concat([x_recv, x_nbr, e], axis=-1)))

    def aggregate(self, tape: Tape, messages: Tensor, receivers: np.ndarray, n: int) -> Tensor:
        """Mean of each node's incoming messages; zero rows for nodes without any."""
        if len(receivers) == 0:
            return tape.constant(np.zeros((n, self.config.state_dim)))
        counts = np.bincount(receivers, minlength=n)
        weights = np.zeros((n, len(receivers)), dtype=tape.dtype)
        weights[receivers, np.arange(len(receivers))] = 1.0 / counts[receivers]
        return matmul(weights, messages)

    def highway_update(self, tape: Tape, store: ParamStore, x: Tensor, m: Tensor, v: Tensor) -> Tensor:
        return self.highway(tape, store, concat([x, m, v], axis=-1), x)

    def _step_rows(self, tape: Tape, store: ParamStore, g: MolGraph, states: Tensor, features: Tensor, rows: list[int]) -> Tensor:
        """New states for ``rows`` only, read from ``states``."""
        edges = EdgeList.of(g, rows)
        position = {node: k for k, node in enumerate(rows)}
        if len(edges):
            msgs = self.message(
                tape,
                store,
                take(states, edges.receivers),
                take(states, edges.neighbours),
                self.bond_embedding(tape, store, edges.bond_types),
            )
            local_recv = np.asarray([position[int(r)] for r in edges.receivers], dtype=np.intp)
            m = self.aggregate(tape, msgs, local_recv, len(rows))
        else:
            m = tape.constant(np.zeros((len(rows), self.config.state_dim)))
        return self.highway_update(tape, store, take(states, rows), m, take(features, rows))

    def step(self, tape: Tape, store: ParamStore, g: MolGraph, states: Tensor, features: Tensor) -> Tensor:
        """One synchronous update of every node."""
        return self._step_rows(tape, store, g, states, features, list(range(len(g))))

    # ─── Composition ─────────────────────────────────────────────────

    def encode(self, tape: Tape, store: ParamStore, g: MolGraph, states: Tensor, features: Tensor, steps: int) -> Tensor:
        for _ in range(steps):
            states = self.step(tape, store, g, states, features)
        return states

    def initial_states(self, tape: Tape, store: ParamStore, g: MolGraph) -> tuple[Tensor, Tensor]:
        """Features and fully propagated states for an unedited graph."""
        features = self.featurizer.features(tape, store, g)
        states = self.init_node_states(tape, store, features)
        return features, self.encode(tape, store, g, states, features, self.config.message_passing_steps)

    def refresh_after_edit(self, tape: Tape, store: ParamStore, g: MolGraph, states: Tensor, u: int, v: int) -> tuple[Tensor, Tensor]:
        """Update ``u`` and ``v`` over their new neighbour sets, then one global step.

        ``g`` is the graph after the edit. Returns the recomputed features and
        the refreshed states.
        """
        features = self.featurizer.features(tape, store, g)
        n = len(g)
        edited = sorted({u, v})
        updated = self._step_rows(tape, store, g, states, features, edited)
        index = np.arange(n, dtype=np.intp)
        for k, node in enumerate(edited):
            index[node] = n + k
        states = take(concat([states, updated], axis=0), index)
        return features, self.step(tape, store, g, states, features)
