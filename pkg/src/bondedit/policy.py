"""Edit policy: prediction heads, environment transition and supervised rollouts.

An episode edits the input graph one bond at a time. Each step makes up to
three sub-decisions: a continuation signal (stop or edit), an atom pair from
the current top-K candidates, and a new bond type for that pair. After an
edit the two edited atoms are refreshed over their new neighbour sets,
every atom gets one more message-passing step, and the recurrent state is
advanced with a GRU on the chosen pair's representation.

Supervised rollouts score every sub-decision against the remaining gold edit
set (+1 right, -1 wrong) and stop at the first wrong sub-decision. Whenever an
episode ends, a delayed reward is added: the final reward if the episode
stopped correctly with the full gold set applied, its negative otherwise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any

import numpy as np

from bondedit.config import ModelConfig
from bondedit.errors import ActionError
from bondedit.gnn import GraphEncoder
from bondedit.layers import GRUCell, TwoLayerNet
from bondedit.molgraph import BondType, MolGraph, Pair, ReactionRecord, ReactionTriple, apply_triple
from bondedit.pairnet import PairScores, TopKSet
from bondedit.params import ParamStore
from bondedit.tape import Tape, Tensor, concat, log_softmax, mean, reshape, softplus, sub, take

if TYPE_CHECKING:
    from bondedit.model import ReactionModel

logger = logging.getLogger(__name__)

SIGNAL, PAIR, BOND = 0, 1, 2
SUB_ACTION_NAMES = ("signal", "pair", "bond")


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Action:
    """``signal=0`` stops the episode; ``signal=1`` edits ``pair`` to ``bond``."""

    signal: int
    pair: Pair | None = None
    bond: BondType | None = None

    def __post_init__(self) -> None:
        if self.signal not in (0, 1):
            msg = f"signal must be 0 or 1, got {self.signal}"
            raise ActionError(msg)
        if self.signal == 0 and (self.pair is not None or self.bond is not None):
            msg = "a stop action carries no pair or bond"
            raise ActionError(msg)
        if self.signal == 1 and (self.pair is None or self.bond is None):
            msg = "an edit action needs both a pair and a bond"
            raise ActionError(msg)

    @classmethod
    def stop(cls) -> Action:
        return cls(0)

    @classmethod
    def edit(cls, pair: Pair, bond: BondType) -> Action:
        return cls(1, pair, BondType(bond))

    def to_triple(self) -> ReactionTriple:
        assert self.pair is not None and self.bond is not None
        return ReactionTriple.of(self.pair[0], self.pair[1], self.bond)


@dataclass(frozen=True)
class EpisodeState:
    """One point of an episode. Values are never mutated; steps return new states."""

    graph: MolGraph
    features: Tensor
    node_states: Tensor
    h: Tensor
    consumed: frozenset[Pair] = frozenset()
    step: int = 0
    done: bool = False
    edits: tuple[ReactionTriple, ...] = ()


@dataclass
class Observation:
    """Everything the heads read at one state."""

    scored: PairScores
    topk: TopKSet
    pooled: Tensor
    signal_logit: Tensor
    value: Tensor
    can_continue: bool

    @property
    def continue_probability(self) -> float:
        x = float(self.signal_logit.value)
        return float(1.0 / (1.0 + np.exp(-x))) if x >= 0 else float(np.exp(x) / (1.0 + np.exp(x)))


@dataclass
class BondDistribution:
    """Log-probabilities over every bond type except the current one."""

    candidates: list[BondType]
    log_probs: Tensor

    def probabilities(self, num_bond_types: int) -> np.ndarray:
        """Full-length vector; the current bond gets probability 0."""
        full = np.zeros(num_bond_types)
        for b, lp in zip(self.candidates, self.log_probs.value, strict=True):
            full[int(b)] = np.exp(lp)
        return full

    def log_prob(self, bond: BondType) -> Tensor:
        try:
            k = self.candidates.index(bond)
        except ValueError:
            msg = f"bond {BondType(bond).name} is not a permitted choice here"
            raise ActionError(msg) from None
        return self.log_probs[k]


@dataclass
class StepOutcome:
    """One step of an episode: chosen sub-actions with their log-probabilities and rewards.

    ``log_probs``, ``rewards`` and ``correct`` hold one entry per evaluated
    sub-action (signal, then pair, then bond); ``correct`` is only filled by
    supervised rollouts.
    """

    step: int
    signal: int
    log_probs: list[Tensor]
    probabilities: list[float]
    value: Tensor
    signal_logit: Tensor
    rewards: list[float] = field(default_factory=list)
    correct: list[bool] = field(default_factory=list)
    scored: PairScores | None = None
    topk: TopKSet | None = None
    targets: np.ndarray | None = None
    pair: Pair | None = None
    bond: BondType | None = None
    gold_best: int | None = None
    forced_stop: bool = False

    @property
    def reward(self) -> float:
        return float(sum(self.rewards))

    @property
    def action(self) -> Action | None:
        """The full action, or None when a wrong pair or signal cut the step short."""
        if self.signal == 0:
            return Action.stop()
        if self.pair is None or self.bond is None:
            return None
        return Action.edit(self.pair, self.bond)

    def stop_log_prob(self) -> Tensor:
        """log p(signal = 0) at this step."""
        return -softplus(self.signal_logit)


@dataclass
class Episode:
    """A supervised rollout and the bookkeeping the loss terms need."""

    record_id: str
    steps: list[StepOutcome]
    gold_length: int
    max_steps: int
    first_wrong: int | None
    final_reward: float
    predicted: tuple[ReactionTriple, ...]

    @property
    def num_edits(self) -> int:
        """Steps that chose to edit (the wrong final one included)."""
        return sum(1 for s in self.steps if s.signal == 1)

    @property
    def num_sub_steps(self) -> int:
        return sum(len(s.log_probs) for s in self.steps)

    @property
    def zeta(self) -> np.ndarray:
        """1 for every sub-step up to and including the first wrong one, then 0."""
        z = np.zeros(3 * (self.max_steps + 1), dtype=np.int8)
        for s in self.steps:
            for k in range(len(s.log_probs)):
                index = 3 * s.step + k
                if self.first_wrong is None or index <= self.first_wrong:
                    z[index] = 1
        return z

    @property
    def total_reward(self) -> float:
        return float(sum(s.reward for s in self.steps))

    def returns(self, gamma: float = 1.0) -> list[float]:
        """Discounted return from each step: ``R_t = r_t + gamma * R_{t+1}``."""
        out = [0.0] * len(self.steps)
        running = 0.0
        for t in range(len(self.steps) - 1, -1, -1):
            running = self.steps[t].reward + gamma * running
            out[t] = running
        return out

    @property
    def succeeded(self) -> bool:
        return self.first_wrong is None and self.final_reward > 0

    def first_wrong_kind(self) -> str | None:
        return None if self.first_wrong is None else SUB_ACTION_NAMES[self.first_wrong % 3]

    def trace(self) -> list[dict[str, Any]]:
        """One JSON-ready row per step: sub-actions, probabilities, rewards and correctness."""
        rows = []
        for s in self.steps:
            rows.append(
                {
                    "id": self.record_id,
                    "step": s.step,
                    "signal": s.signal,
                    "pair": list(s.pair) if s.pair is not None else None,
                    "bond": s.bond.name if s.bond is not None else None,
                    "probabilities": list(s.probabilities),
                    "rewards": list(s.rewards),
                    "correct": list(s.correct),
                    "value": s.value.item(),
                    "first_wrong": self.first_wrong is not None and 3 * s.step <= self.first_wrong < 3 * s.step + 3,
                }
            )
        return rows


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------


class PolicyHeads:
    def __init__(self, config: ModelConfig, encoder: GraphEncoder) -> None:
        self.config = config
        self.encoder = encoder
        h, p, eb = config.gru_hidden, config.pair_hidden, config.bond_embed_dim
        self.signal_net = TwoLayerNet("head.signal", h + p, config.head_hidden, 1)
        self.bond_net = TwoLayerNet("head.bond", h + p + eb, config.head_hidden, 1)
        self.value_net = TwoLayerNet("head.value", p, config.value_hidden, 1)
        self.gru = GRUCell("gru", p, h)

    def register(self, store: ParamStore, rng: np.random.Generator) -> None:
        self.signal_net.register(store, rng)
        self.bond_net.register(store, rng)
        self.value_net.register(store, rng)
        self.gru.register(store, rng)

    def signal_logit(self, tape: Tape, store: ParamStore, h: Tensor, pooled: Tensor) -> Tensor:
        return reshape(self.signal_net(tape, store, concat([h, pooled])), ())

    def signal_head(self, tape: Tape, store: ParamStore, h: Tensor, pooled: Tensor) -> float:
        """p(signal = 1)."""
        logit = float(self.signal_logit(tape, store, h, pooled).value)
        return float(1.0 / (1.0 + np.exp(-logit)))

    @staticmethod
    def signal_log_prob(logit: Tensor, signal: int) -> Tensor:
        return -softplus(-logit) if signal == 1 else -softplus(logit)

    @staticmethod
    def pair_head(topk: TopKSet) -> Tensor:
        """Log-softmax over the stored top-K scores."""
        if topk.scores is None:
            msg = "no candidate pairs: the episode must stop"
            raise ActionError(msg)
        return log_softmax(topk.scores)

    def bond_head(self, tape: Tape, store: ParamStore, h: Tensor, z_uv: Tensor, b_old: BondType) -> BondDistribution:
        candidates = [BondType(b) for b in range(self.config.num_bond_types) if b != int(b_old)]
        count = len(candidates)
        e_new = self.encoder.bond_embedding(tape, store, [int(b) for b in candidates])
        e_old = self.encoder.bond_embedding(tape, store, [int(b_old)] * count)
        zeros = np.zeros(count, dtype=np.intp)
        rows = concat(
            [take(reshape(h, (1, h.shape[0])), zeros), take(reshape(z_uv, (1, z_uv.shape[0])), zeros), sub(e_new, e_old)],
            axis=1,
        )
        logits = reshape(self.bond_net(tape, store, rows), (count,))
        return BondDistribution(candidates, log_softmax(logits))

    def value_estimate(self, tape: Tape, store: ParamStore, topk: TopKSet) -> Tensor:
        """``V`` of the mean top-K representation (zero input for an empty set)."""
        pooled = tape.constant(np.zeros(self.config.pair_hidden)) if topk.reps is None else mean(topk.reps, axis=0)
        return reshape(self.value_net(tape, store, pooled), ())

    def advance(self, tape: Tape, store: ParamStore, h: Tensor, z_uv: Tensor) -> Tensor:
        return self.gru(tape, store, h, z_uv)


# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------


def transition(model: ReactionModel, tape: Tape, state: EpisodeState, topk: TopKSet, action: Action) -> EpisodeState:
    """Apply ``action``; a stop freezes the state and ends the episode."""
    if state.done:
        msg = "the episode has already ended"
        raise ActionError(msg)
    if action.signal == 0:
        return replace(state, done=True)
    pair = action.pair
    assert pair is not None and action.bond is not None
    if pair in state.consumed:
        msg = f"pair {pair} was already edited in this episode"
        raise ActionError(msg)
    if pair not in topk.pairs:
        msg = f"pair {pair} is masked or not among the top-{model.config.top_k} candidates"
        raise ActionError(msg)
    if state.graph.bond(*pair) is action.bond:
        msg = f"pair {pair} already has bond {action.bond.name}"
        raise ActionError(msg)
    triple = action.to_triple()
    graph = apply_triple(state.graph, triple)
    assert topk.reps is not None
    z_uv = topk.reps[topk.position(pair)]
    features, node_states = model.encoder.refresh_after_edit(tape, model.store, graph, state.node_states, *pair)
    h = model.heads.advance(tape, model.store, state.h, z_uv)
    return EpisodeState(
        graph=graph,
        features=features,
        node_states=node_states,
        h=h,
        consumed=state.consumed | {pair},
        step=state.step + 1,
        done=False,
        edits=(*state.edits, triple),
    )


def env_step(model: ReactionModel, tape: Tape, state: EpisodeState, action: Action) -> tuple[EpisodeState, StepOutcome]:
    """Score ``action`` at ``state`` and apply it."""
    obs = model.observe(tape, state)
    if action.signal == 1 and not obs.can_continue:
        msg = "no edit is possible at this state"
        raise ActionError(msg)
    heads = model.heads
    log_probs = [heads.signal_log_prob(obs.signal_logit, action.signal)]
    if action.signal == 1:
        assert action.pair is not None and action.bond is not None
        if action.pair not in obs.topk.pairs:
            msg = f"pair {action.pair} is masked or not among the top-K candidates"
            raise ActionError(msg)
        k = obs.topk.position(action.pair)
        log_probs.append(heads.pair_head(obs.topk)[k])
        assert obs.topk.reps is not None
        bonds = heads.bond_head(tape, model.store, state.h, obs.topk.reps[k], state.graph.bond(*action.pair))
        log_probs.append(bonds.log_prob(action.bond))
    nxt = transition(model, tape, state, obs.topk, action)
    outcome = StepOutcome(
        step=state.step,
        signal=action.signal,
        pair=action.pair,
        bond=action.bond,
        log_probs=log_probs,
        probabilities=[float(np.exp(lp.value)) for lp in log_probs],
        value=obs.value,
        signal_logit=obs.signal_logit,
        scored=obs.scored,
        topk=obs.topk,
    )
    return nxt, outcome


# ---------------------------------------------------------------------------
# Supervised rollout
# ---------------------------------------------------------------------------


def _choose(probabilities: np.ndarray, rng: np.random.Generator | None) -> int:
    """Sample an index, or take the argmax (lowest index on ties) without an rng."""
    if rng is None:
        return int(np.argmax(probabilities))
    p = np.asarray(probabilities, dtype=np.float64)
    return int(rng.choice(len(p), p=p / p.sum()))


def rollout_supervised(
    model: ReactionModel,
    tape: Tape,
    record: ReactionRecord,
    rng: np.random.Generator | None = None,
    max_steps: int | None = None,
    follow_gold: bool = False,
) -> Episode:
    """Run one training episode against the gold edit set of ``record``.

    Sub-actions are sampled with ``rng``, or chosen by argmax when ``rng`` is
    None. Pair correctness is membership in the remaining gold pairs, so any
    gold ordering is accepted.

    With ``follow_gold`` every sub-action is the correct one whenever the
    top-K allows it (the best-scored remaining gold pair in the top-K); the
    episode then only goes wrong when no gold pair made the top-K.
    """
    config = model.config
    t_max = config.max_steps if max_steps is None else max_steps
    heads = model.heads
    store = model.store
    step_reward, final_reward = config.step_reward, config.final_reward

    remaining: dict[Pair, BondType] = {t.pair: t.new_bond for t in record.gold_triples}
    state = model.initial_state(tape, record.input_graph)
    steps: list[StepOutcome] = []
    first_wrong: int | None = None
    clean_stop = False

    for tau in range(t_max + 1):
        obs = model.observe(tape, state, allow_edit=tau < t_max)
        candidates = obs.scored.candidates
        targets = np.zeros(len(candidates))
        gold_best: int | None = None
        if remaining:
            gold_idx = [candidates.index(p) for p in sorted(remaining)]
            targets[gold_idx] = 1.0
            gold_best = max(gold_idx, key=lambda k: (obs.scored.values[k], -k))

        outcome = StepOutcome(
            step=tau,
            signal=0,
            log_probs=[],
            probabilities=[],
            value=obs.value,
            signal_logit=obs.signal_logit,
            scored=obs.scored,
            topk=obs.topk,
            targets=targets,
            gold_best=gold_best,
        )
        steps.append(outcome)

        # signal
        p_continue = obs.continue_probability if obs.can_continue else 0.0
        if not obs.can_continue:
            signal = 0
        elif follow_gold:
            signal = 1 if remaining else 0
        else:
            signal = _choose(np.array([1.0 - p_continue, p_continue]), rng)
        outcome.signal = signal
        outcome.forced_stop = not obs.can_continue
        # A forced stop is not a choice of the signal head: probability 1, no gradient.
        if outcome.forced_stop:
            outcome.log_probs.append(tape.constant(0.0))
        else:
            outcome.log_probs.append(heads.signal_log_prob(obs.signal_logit, signal))
        outcome.probabilities.append(p_continue if signal == 1 else 1.0 - p_continue)
        ok = (signal == 1) == bool(remaining)
        outcome.correct.append(ok)
        outcome.rewards.append(step_reward if ok else -step_reward)
        if not ok:
            first_wrong = 3 * tau + SIGNAL
            break
        if signal == 0:
            clean_stop = True
            break

        # pair
        pair_lp = heads.pair_head(obs.topk)
        gold_in_topk = [i for i, p in enumerate(obs.topk.pairs) if p in remaining]
        k = gold_in_topk[0] if follow_gold and gold_in_topk else _choose(np.exp(pair_lp.value), rng)
        pair = obs.topk.pairs[k]
        outcome.pair = pair
        outcome.log_probs.append(pair_lp[k])
        outcome.probabilities.append(float(np.exp(pair_lp.value[k])))
        ok = pair in remaining
        outcome.correct.append(ok)
        outcome.rewards.append(step_reward if ok else -step_reward)
        if not ok:
            first_wrong = 3 * tau + PAIR
            break

        # bond
        assert obs.topk.reps is not None
        bonds = heads.bond_head(tape, store, state.h, obs.topk.reps[k], state.graph.bond(*pair))
        if follow_gold:
            b = remaining[pair]
        else:
            b = bonds.candidates[_choose(np.exp(bonds.log_probs.value), rng)]
        outcome.bond = b
        lp = bonds.log_prob(b)
        outcome.log_probs.append(lp)
        outcome.probabilities.append(float(np.exp(lp.value)))
        ok = b is remaining[pair]
        outcome.correct.append(ok)
        outcome.rewards.append(step_reward if ok else -step_reward)
        if not ok:
            first_wrong = 3 * tau + BOND
            break

        del remaining[pair]
        state = transition(model, tape, state, obs.topk, Action.edit(pair, b))

    # Every episode end earns the delayed reward, including one cut short by a
    # wrong pair or bond; only a correct stop after the full gold set is positive.
    delayed = final_reward if clean_stop else -final_reward
    steps[-1].rewards[-1] += delayed
    episode = Episode(
        record_id=record.record_id,
        steps=steps,
        gold_length=record.num_changes,
        max_steps=t_max,
        first_wrong=first_wrong,
        final_reward=delayed,
        predicted=state.edits,
    )
    logger.debug(
        "episode %s: %d step(s), first wrong %s, reward %.1f",
        record.record_id or "?",
        len(steps),
        episode.first_wrong_kind(),
        episode.total_reward,
    )
    return episode
