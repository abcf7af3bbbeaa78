"""``ReactionModel``: one ParamStore plus the encoder, pair scorer and heads that read it."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from bondedit.config import ModelConfig
from bondedit.elements import ValenceTable
from bondedit.errors import CheckpointError
from bondedit.gnn import GraphEncoder
from bondedit.molgraph import MolGraph
from bondedit.pairnet import CandidateSet, PairScorer
from bondedit.params import ParamStore, load_checkpoint, save_checkpoint
from bondedit.policy import EpisodeState, Observation, PolicyHeads
from bondedit.tape import Tape

logger = logging.getLogger(__name__)


class ReactionModel:
    def __init__(self, config: ModelConfig, store: ParamStore | None = None) -> None:
        self.config = config
        self.encoder = GraphEncoder(config)
        self.scorer = PairScorer(config, self.encoder)
        self.heads = PolicyHeads(config, self.encoder)
        if store is None:
            store = ParamStore(config.dtype)
            self.register(store, np.random.default_rng(config.seed))
        self.store = store
        self.valence = ValenceTable.from_file(Path(config.valence_table)) if config.valence_table else ValenceTable()

    def register(self, store: ParamStore, rng: np.random.Generator) -> None:
        self.encoder.register(store, rng)
        self.scorer.register(store, rng)
        self.heads.register(store, rng)
        logger.debug("registered %d parameter tensors (%d values)", len(store), store.num_parameters())

    def parameter_names(self) -> list[str]:
        scratch = ParamStore(self.config.dtype)
        self.register(scratch, np.random.default_rng(0))
        return scratch.names()

    # ─── Checkpoints ─────────────────────────────────────────────────

    def save(self, path: Path, extra: dict[str, Any] | None = None) -> None:
        state = {"config": self.config.model_dump(), **(extra or {})}
        save_checkpoint(path, self.store, self.config.config_hash(), state)

    @classmethod
    def load(cls, path: Path, config: ModelConfig | None = None) -> tuple[ReactionModel, dict[str, Any]]:
        """Load a checkpoint; without ``config`` the stored configuration is used."""
        store, state, header = load_checkpoint(path)
        if config is None:
            try:
                config = ModelConfig.model_validate(state["config"])
            except (KeyError, ValidationError) as exc:
                msg = f"checkpoint {path} carries no valid model configuration"
                raise CheckpointError(msg) from exc
        if header.config_hash != config.config_hash():
            msg = "checkpoint was written for a different model configuration (config hash mismatch)"
            raise CheckpointError(msg)
        model = cls(config, store)
        missing = sorted(set(model.parameter_names()) - set(store.names()))
        if missing:
            msg = f"checkpoint is missing tensors: {', '.join(missing)}"
            raise CheckpointError(msg)
        return model, state

    # ─── Forward pieces ──────────────────────────────────────────────

    def new_tape(self, record: bool = True) -> Tape:
        return Tape(self.config.dtype, record=record)

    def initial_state(self, tape: Tape, g: MolGraph) -> EpisodeState:
        features, node_states = self.encoder.initial_states(tape, self.store, g)
        h = tape.constant(np.zeros(self.config.gru_hidden))
        return EpisodeState(graph=g, features=features, node_states=node_states, h=h)

    def candidates(self, state: EpisodeState) -> CandidateSet:
        return CandidateSet.of(state.graph, state.consumed, self.config.exclude_reagents)

    def observe(self, tape: Tape, state: EpisodeState, allow_edit: bool | None = None) -> Observation:
        """Score pairs, take the top-K and evaluate the signal and value heads."""
        if allow_edit is None:
            allow_edit = state.step < self.config.max_steps
        scored = self.scorer.score_pairs(tape, self.store, state.h, state.node_states, state.graph, self.candidates(state))
        topk = self.scorer.top_k(scored)
        pooled = self.scorer.pooled_rep(tape, self.store, topk)
        return Observation(
            scored=scored,
            topk=topk,
            pooled=pooled,
            signal_logit=self.heads.signal_logit(tape, self.store, state.h, pooled),
            value=self.heads.value_estimate(tape, self.store, topk),
            can_continue=allow_edit and not topk.empty,
        )
