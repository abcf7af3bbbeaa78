"""Decoding: beam search, greedy decoding and product post-processing.

Each decoding round expands the live beams three times: over the
continuation signal, over the top-K pairs and over the new bond type. After
every expansion the pool (finished beams included) is cut back to the beam
width. A beam's score is its joint log-probability divided by the number of
rounds run so far; finished beams are rescaled along with the live ones, so
all beams in a pool share one divisor.

A forced stop (step limit reached or no candidate pair left) adds nothing to
the log-probability.

Greedy decoding makes one choice per step: stopping, or the (pair, bond)
with the highest joint probability ``p(go) p(pair) p(bond | pair)``.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

from bondedit.elements import ValenceTable
from bondedit.errors import ConfigError
from bondedit.molgraph import (
    MolGraph,
    ReactionRecord,
    ReactionTriple,
    apply_all,
    canonical_hash,
    rebalance_hydrogens,
    validate_valence,
)
from bondedit.policy import Action, EpisodeState, Observation, transition
from bondedit.tape import Tape

if TYPE_CHECKING:
    from bondedit.model import ReactionModel

logger = logging.getLogger(__name__)

POSTPROCESS_VARIANTS = {
    "raw": (False, False),
    "dedup": (False, True),
    "valid": (True, False),
    "both": (True, True),
}


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Beam:
    """A partial action sequence with its own episode state.

    ``pending_edit`` and ``pending_pair`` hold the sub-actions chosen so far
    in the current round; they are folded into ``actions`` once the round's
    bond is chosen.
    """

    actions: tuple[Action, ...]
    log_prob: float
    state: EpisodeState
    finished: bool = False
    observation: Observation | None = None
    pending_pair: int | None = None
    pending_edit: bool = False

    def order_key(self) -> tuple[tuple[int, int, int, int], ...]:
        keys = [_action_key(a) for a in self.actions]
        if self.pending_edit:
            pair = (-1, -1) if self.pending_pair is None or self.observation is None else self.observation.topk.pairs[self.pending_pair]
            keys.append((1, pair[0], pair[1], -1))
        return tuple(keys)

    @property
    def edits(self) -> tuple[ReactionTriple, ...]:
        return tuple(a.to_triple() for a in self.actions if a.signal == 1)


def _action_key(action: Action) -> tuple[int, int, int, int]:
    if action.signal == 0:
        return (0, -1, -1, -1)
    assert action.pair is not None and action.bond is not None
    return (1, action.pair[0], action.pair[1], int(action.bond))


@dataclass
class Candidate:
    """One ranked decoding result."""

    edits: tuple[ReactionTriple, ...]
    log_prob: float
    score: float
    product: MolGraph
    valid: bool = True
    rank: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.edits)


# ---------------------------------------------------------------------------
# Beam search
# ---------------------------------------------------------------------------


def _prune(pool: Iterable[Beam], width: int) -> list[Beam]:
    return sorted(pool, key=lambda b: (-b.log_prob, b.order_key()))[:width]


def _expand_signal(model: ReactionModel, tape: Tape, beam: Beam, t_max: int) -> Iterator[Beam]:
    state = beam.state
    obs = model.observe(tape, state, allow_edit=state.step < t_max)
    if not obs.can_continue:
        yield replace(beam, actions=(*beam.actions, Action.stop()), finished=True, observation=obs)
        return
    logit = obs.signal_logit
    lp_stop = float(model.heads.signal_log_prob(logit, 0).value)
    lp_go = float(model.heads.signal_log_prob(logit, 1).value)
    yield replace(beam, actions=(*beam.actions, Action.stop()), log_prob=beam.log_prob + lp_stop, finished=True, observation=obs)
    yield replace(beam, log_prob=beam.log_prob + lp_go, observation=obs, pending_edit=True)


def _expand_pair(model: ReactionModel, beam: Beam) -> Iterator[Beam]:
    assert beam.observation is not None
    log_probs = model.heads.pair_head(beam.observation.topk).value
    for k, lp in enumerate(log_probs):
        yield replace(beam, log_prob=beam.log_prob + float(lp), pending_pair=k)


def _expand_bond(model: ReactionModel, tape: Tape, beam: Beam) -> Iterator[Beam]:
    obs = beam.observation
    assert obs is not None and obs.topk.reps is not None and beam.pending_pair is not None
    pair = obs.topk.pairs[beam.pending_pair]
    state = beam.state
    bonds = model.heads.bond_head(tape, model.store, state.h, obs.topk.reps[beam.pending_pair], state.graph.bond(*pair))
    for b, lp in zip(bonds.candidates, bonds.log_probs.value, strict=True):
        action = Action.edit(pair, b)
        yield Beam(
            actions=(*beam.actions, action),
            log_prob=beam.log_prob + float(lp),
            state=transition(model, tape, state, obs.topk, action),
        )


def _search(model: ReactionModel, g: MolGraph, width: int, t_max: int) -> tuple[list[Beam], int]:
    tape = model.new_tape(record=False)
    pool = [Beam(actions=(), log_prob=0.0, state=model.initial_state(tape, g))]
    rounds = 0
    while any(not b.finished for b in pool):
        rounds += 1
        expanded: list[Beam] = []
        for beam in pool:
            expanded.extend([beam] if beam.finished else _expand_signal(model, tape, beam, t_max))
        pool = _prune(expanded, width)

        expanded = []
        for beam in pool:
            expanded.extend(_expand_pair(model, beam) if beam.pending_edit else [beam])
        pool = _prune(expanded, width)

        expanded = []
        for beam in pool:
            expanded.extend(_expand_bond(model, tape, beam) if beam.pending_edit else [beam])
        pool = _prune(expanded, width)
    return pool, rounds


def beam_search(
    model: ReactionModel,
    g: MolGraph,
    beam_width: int | None = None,
    max_steps: int | None = None,
) -> list[Candidate]:
    """Ranked candidates for ``g``, best first, with realised products.

    The pool is pruned after every sub-action phase, so width 1 takes the
    argmax of each sub-action in turn. ``greedy_decode`` maximises the joint
    probability of a whole step instead.
    """
    width = model.config.beam_width if beam_width is None else beam_width
    if width < 1:
        msg = f"beam width must be at least 1, got {width}"
        raise ConfigError(msg)
    t_max = model.config.max_steps if max_steps is None else max_steps
    beams, rounds = _search(model, g, width, t_max)
    candidates = [_candidate(model, g, b.edits, b.log_prob, rounds) for b in beams]
    for rank, c in enumerate(candidates, start=1):
        c.rank = rank
    logger.debug("beam search: %d candidate(s) after %d round(s)", len(candidates), rounds)
    return candidates


@dataclass(frozen=True)
class StepChoice:
    """One step of greedy decoding; ``pair_index`` None means stop."""

    pair_index: int | None
    bond_index: int | None
    log_prob: float


def best_joint_step(
    lp_stop: float,
    lp_go: float,
    pair_log_probs: Sequence[float],
    bond_log_probs: Sequence[Sequence[float]],
) -> StepChoice:
    """Argmax of ``p(signal, pair, bond)`` over stopping and every (pair, bond).

    An edit scores ``log p(go) + log p(pair) + log p(bond | pair)``. Ties go to
    stopping, then to the lower pair and bond index.
    """
    best = StepChoice(None, None, lp_stop)
    for k, (lp_pair, lps_bond) in enumerate(zip(pair_log_probs, bond_log_probs, strict=True)):
        for j, lp_bond in enumerate(lps_bond):
            lp = lp_go + float(lp_pair) + float(lp_bond)
            if lp > best.log_prob:
                best = StepChoice(k, j, lp)
    return best


def greedy_decode(model: ReactionModel, g: MolGraph, max_steps: int | None = None) -> Candidate:
    """Take the most probable full step (stop, or pair with bond) at every step.

    Unlike beam width 1, which settles the signal before looking at pairs and
    bonds, each step here weighs stopping against every edit's joint probability.
    """
    t_max = model.config.max_steps if max_steps is None else max_steps
    tape = model.new_tape(record=False)
    state = model.initial_state(tape, g)
    heads = model.heads
    total = 0.0
    rounds = 0
    while True:
        rounds += 1
        obs = model.observe(tape, state, allow_edit=state.step < t_max)
        if not obs.can_continue:
            break
        assert obs.topk.reps is not None
        bonds = [
            heads.bond_head(tape, model.store, state.h, obs.topk.reps[k], state.graph.bond(*pair))
            for k, pair in enumerate(obs.topk.pairs)
        ]
        choice = best_joint_step(
            float(heads.signal_log_prob(obs.signal_logit, 0).value),
            float(heads.signal_log_prob(obs.signal_logit, 1).value),
            heads.pair_head(obs.topk).value,
            [b.log_probs.value for b in bonds],
        )
        total += choice.log_prob
        if choice.pair_index is None or choice.bond_index is None:
            break
        pair = obs.topk.pairs[choice.pair_index]
        bond = bonds[choice.pair_index].candidates[choice.bond_index]
        state = transition(model, tape, state, obs.topk, Action.edit(pair, bond))
    candidate = _candidate(model, g, state.edits, total, rounds)
    candidate.rank = 1
    return candidate


def enumerate_sequences(model: ReactionModel, g: MolGraph, max_steps: int | None = None) -> list[tuple[tuple[Action, ...], float]]:
    """Every complete action sequence with its joint log-probability, best first.

    Exponential in ``max_steps``; meant for checking beam search on tiny graphs.
    """
    t_max = model.config.max_steps if max_steps is None else max_steps
    tape = model.new_tape(record=False)
    done: list[Beam] = []
    frontier = [Beam(actions=(), log_prob=0.0, state=model.initial_state(tape, g))]
    while frontier:
        grown: list[Beam] = []
        for beam in frontier:
            for b in _expand_signal(model, tape, beam, t_max):
                if b.finished:
                    done.append(b)
                    continue
                for p in _expand_pair(model, b):
                    grown.extend(_expand_bond(model, tape, p))
        frontier = grown
    ranked = sorted(done, key=lambda b: (-b.log_prob, b.order_key()))
    return [(b.actions, b.log_prob) for b in ranked]


# ---------------------------------------------------------------------------
# Products
# ---------------------------------------------------------------------------


def realize_products(g: MolGraph, edits: Sequence[ReactionTriple]) -> MolGraph:
    """Apply ``edits``, consume hydrogens on atoms that gained bonds and drop reagent fragments."""
    after = rebalance_hydrogens(g, apply_all(g, edits)) if edits else g
    keep = [
        atom
        for component in after.components()
        if not any(after.atoms[i].is_reagent for i in component)
        for atom in component
    ]
    return after.subgraph(sorted(keep))


def _candidate(model: ReactionModel, g: MolGraph, edits: tuple[ReactionTriple, ...], log_prob: float, rounds: int) -> Candidate:
    product = realize_products(g, edits)
    violations = validate_valence(product, model.valence)
    return Candidate(
        edits=edits,
        log_prob=log_prob,
        score=log_prob / max(rounds, 1),
        product=product,
        valid=not violations,
        violations=[str(v) for v in violations],
    )


def postprocess(
    candidates: Sequence[Candidate],
    remove_invalid: bool = True,
    dedup: bool = True,
    table: ValenceTable | None = None,
) -> list[Candidate]:
    """Filter the ranked list; survivors keep their order and are re-ranked from 1.

    Duplicates are detected on unmapped canonical hashes and the first
    (best-scored) representative is kept.
    """
    seen: set[str] = set()
    out = []
    for c in candidates:
        invalid = bool(validate_valence(c.product, table)) if table is not None else not c.valid
        if remove_invalid and invalid:
            continue
        if dedup:
            digest = canonical_hash(c.product)
            if digest in seen:
                continue
            seen.add(digest)
        out.append(replace(c, rank=len(out) + 1))
    return out


def match_gold(product: MolGraph, record: ReactionRecord) -> bool:
    """Whether ``product`` bonds the gold product's mapped atoms exactly as gold does.

    Candidate atoms outside the gold product are ignored unless they are bonded
    to one of its atoms. Without map numbers on the gold product the unmapped
    canonical hashes of the two products are compared instead.
    """
    gold = record.product_graph
    gold_maps = gold.map_index()
    if not gold_maps:
        expected = realize_products(record.input_graph, sorted(record.gold_triples, key=lambda t: t.pair))
        return canonical_hash(product) == canonical_hash(expected)
    cand_maps = product.map_index()
    if not set(gold_maps) <= set(cand_maps):
        return False
    to_gold = {cand_maps[m]: gi for m, gi in gold_maps.items()}
    for ci, gi in to_gold.items():
        for cj in product.neighbors(ci):
            gj = to_gold.get(cj)
            if gj is None or gold.bond(gi, gj) is not product.bond(ci, cj):
                return False
        if len(product.neighbors(ci)) != len(gold.neighbors(gi)):
            return False
    return True


def gold_rank(candidates: Sequence[Candidate], record: ReactionRecord) -> int | None:
    """1-based rank of the first candidate matching gold, or None."""
    for position, c in enumerate(candidates, start=1):
        if match_gold(c.product, record):
            return position
    return None

