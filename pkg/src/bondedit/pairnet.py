"""Atom-pair scoring and top-K candidate selection.

The candidate universe is every unordered atom pair ``i < j`` of the current
graph, bonded or not (a missing bond is embedded as NULL). Pairs touching a
reagent atom (when reagents are excluded) and pairs already edited in the
episode are masked: they are scored but never selected.

Two scorers are available. The local one builds
``z_ij = relu(W [h, x_i + x_j, e_ij] + b)``. The global one adds a context
vector per atom from self-attention over all atoms and builds
``z_ij = relu(W [h, x_i + x_j, c_i + c_j, e_ij] + b)``. Both score a pair
with a two-layer network on ``z_ij``.
"""

from __future__ import annotations

from collections.abc import Collection
from dataclasses import dataclass, field

import numpy as np

from bondedit.config import ModelConfig
from bondedit.gnn import GraphEncoder
from bondedit.layers import Dense, TwoLayerNet
from bondedit.molgraph import BondType, MolGraph, Pair
from bondedit.params import ParamStore
from bondedit.tape import Tape, Tensor, concat, matmul, mean, relu, reshape, softmax, take


@dataclass(frozen=True)
class CandidateSet:
    """All pairs ``i < j`` in lexicographic order with their current bond and eligibility."""

    pairs: tuple[Pair, ...]
    first: np.ndarray
    second: np.ndarray
    bond_types: np.ndarray
    eligible: np.ndarray
    _index: dict[Pair, int] = field(repr=False, compare=False)

    @classmethod
    def of(cls, g: MolGraph, consumed: Collection[Pair] = (), exclude_reagents: bool = True) -> CandidateSet:
        n = len(g)
        pairs = tuple((i, j) for i in range(n) for j in range(i + 1, n))
        reagents = g.reagent_atoms() if exclude_reagents else frozenset()
        consumed = set(consumed)
        eligible = np.array(
            [p not in consumed and p[0] not in reagents and p[1] not in reagents for p in pairs],
            dtype=bool,
        )
        return cls(
            pairs=pairs,
            first=np.asarray([p[0] for p in pairs], dtype=np.intp),
            second=np.asarray([p[1] for p in pairs], dtype=np.intp),
            bond_types=np.asarray([int(g.bond(*p)) for p in pairs], dtype=np.intp),
            eligible=eligible,
            _index={p: k for k, p in enumerate(pairs)},
        )

    def __len__(self) -> int:
        return len(self.pairs)

    def index(self, pair: Pair) -> int:
        return self._index[pair]


@dataclass
class PairScores:
    candidates: CandidateSet
    reps: Tensor
    scores: Tensor
    attention: np.ndarray | None = None

    @property
    def values(self) -> np.ndarray:
        return self.scores.value


@dataclass
class TopKSet:
    """Up to K eligible candidates in descending score order."""

    indices: list[int]
    pairs: list[Pair]
    scores: Tensor | None
    reps: Tensor | None

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def empty(self) -> bool:
        return not self.indices

    def position(self, pair: Pair) -> int:
        return self.pairs.index(pair)


def select_top_k(scores: np.ndarray, eligible: np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` best eligible scores; ties go to the lower index.

    Candidate indices follow lexicographic pair order, so the index tie-break
    is the ``(i, j)`` lexicographic tie-break.
    """
    idx = np.flatnonzero(eligible)
    if idx.size == 0 or k <= 0:
        return []
    order = np.lexsort((idx, -scores[idx]))
    return [int(i) for i in idx[order[:k]]]


class PairScorer:
    def __init__(self, config: ModelConfig, encoder: GraphEncoder) -> None:
        self.config = config
        self.encoder = encoder
        d = config.state_dim + (1 if config.use_reagent_bit else 0)
        h, eb, p = config.gru_hidden, config.bond_embed_dim, config.pair_hidden
        self.node_width = d
        if config.pair_network == "local":
            self.pair_layer = Dense("pair.local", h + d + eb, p)
        else:
            self.pair_layer = Dense("pair.global", h + 2 * d + eb, p)
        self.attention_hidden = Dense("pair.attention.hidden", 2 * d + eb, p)
        self.attention_out = Dense("pair.attention.out", p, 1)
        self.score_net = TwoLayerNet("pair.score", p, config.pair_score_hidden, 1)
        self.pool = Dense("pair.pool", p, p, bias=False)

    def register(self, store: ParamStore, rng: np.random.Generator) -> None:
        self.pair_layer.register(store, rng)
        if self.config.pair_network == "global":
            self.attention_hidden.register(store, rng)
            self.attention_out.register(store, rng)
        self.score_net.register(store, rng)
        self.pool.register(store, rng)

    def node_inputs(self, tape: Tape, states: Tensor, g: MolGraph) -> Tensor:
        """Node states, extended with the reagent flag when enabled."""
        if not self.config.use_reagent_bit:
            return states
        flags = np.array([1.0 if a.is_reagent else 0.0 for a in g.atoms]).reshape(len(g), 1)
        return concat([states, tape.constant(flags)], axis=1)

    def _rows_of(self, tape: Tape, h: Tensor, count: int) -> Tensor:
        return take(reshape(h, (1, h.shape[0])), np.zeros(count, dtype=np.intp))

    def _finish(self, tape: Tape, store: ParamStore, candidates: CandidateSet, z_in: Tensor, attention: np.ndarray | None) -> PairScores:
        reps = relu(self.pair_layer(tape, store, z_in))
        scores = reshape(self.score_net(tape, store, reps), (len(candidates),))
        return PairScores(candidates, reps, scores, attention)

    def score_pairs_local(self, tape: Tape, store: ParamStore, h: Tensor, states: Tensor, g: MolGraph, candidates: CandidateSet) -> PairScores:
        x = self.node_inputs(tape, states, g)
        e = self.encoder.bond_embedding(tape, store, candidates.bond_types)
        z_in = concat(
            [self._rows_of(tape, h, len(candidates)), take(x, candidates.first) + take(x, candidates.second), e],
            axis=1,
        )
        return self._finish(tape, store, candidates, z_in, None)

    def attention_context(self, tape: Tape, store: ParamStore, x: Tensor, g: MolGraph) -> tuple[Tensor, Tensor]:
        """Context ``c_i = sum_j a_ij x_j`` with ``a_i.`` a softmax over every atom ``j`` (``j = i`` included)."""
        n = len(g)
        rows = np.repeat(np.arange(n, dtype=np.intp), n)
        cols = np.tile(np.arange(n, dtype=np.intp), n)
        types = [int(g.bond(i, j)) if i != j else int(BondType.NULL) for i in range(n) for j in range(n)]
        e = self.encoder.bond_embedding(tape, store, types)
        r = relu(self.attention_hidden(tape, store, concat([take(x, rows), take(x, cols), e], axis=1)))
        logits = reshape(self.attention_out(tape, store, r), (n, n))
        weights = softmax(logits, axis=1)
        return matmul(weights, x), weights

    def score_pairs_global(self, tape: Tape, store: ParamStore, h: Tensor, states: Tensor, g: MolGraph, candidates: CandidateSet) -> PairScores:
        x = self.node_inputs(tape, states, g)
        if len(g) == 0:
            context, attention = x, np.zeros((0, 0))
        else:
            context, weights = self.attention_context(tape, store, x, g)
            attention = weights.value
        e = self.encoder.bond_embedding(tape, store, candidates.bond_types)
        z_in = concat(
            [
                self._rows_of(tape, h, len(candidates)),
                take(x, candidates.first) + take(x, candidates.second),
                take(context, candidates.first) + take(context, candidates.second),
                e,
            ],
            axis=1,
        )
        return self._finish(tape, store, candidates, z_in, attention)

    def score_pairs(self, tape: Tape, store: ParamStore, h: Tensor, states: Tensor, g: MolGraph, candidates: CandidateSet) -> PairScores:
        if self.config.pair_network == "local":
            return self.score_pairs_local(tape, store, h, states, g, candidates)
        return self.score_pairs_global(tape, store, h, states, g, candidates)

    def top_k(self, scored: PairScores, k: int | None = None) -> TopKSet:
        chosen = select_top_k(scored.values, scored.candidates.eligible, self.config.top_k if k is None else k)
        if not chosen:
            return TopKSet([], [], None, None)
        return TopKSet(
            indices=chosen,
            pairs=[scored.candidates.pairs[i] for i in chosen],
            scores=take(scored.scores, chosen),
            reps=take(scored.reps, chosen),
        )

    def pooled_rep(self, tape: Tape, store: ParamStore, topk: TopKSet) -> Tensor:
        """Mean over entries of ``W z``; a zero vector for an empty set."""
        if topk.reps is None:
            return tape.constant(np.zeros(self.config.pair_hidden))
        return mean(self.pool(tape, store, topk.reps), axis=0)
