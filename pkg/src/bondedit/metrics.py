"""Evaluation metrics and reports.

Coverage@k and Recall@k are computed from a pair-scoring pass over the
unedited input graph: coverage asks whether every gold pair lies among the k
best unmasked pairs, recall counts the fraction of gold pairs that do.
Precision@k is the fraction of reactions whose gold product appears among the
first k decoded candidates.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from bondedit.decode import POSTPROCESS_VARIANTS, Candidate, beam_search, gold_rank, postprocess
from bondedit.errors import DataError
from bondedit.logs import JsonlWriter
from bondedit.molgraph import Pair, ReactionRecord
from bondedit.pairnet import select_top_k
from bondedit.policy import rollout_supervised

if TYPE_CHECKING:
    from bondedit.model import ReactionModel

logger = logging.getLogger(__name__)

DEFAULT_COVERAGE_KS = (1, 2, 3, 5, 10, 20, 40, 80)
DEFAULT_PRECISION_KS = (1, 3, 5)
SYMMETRY_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ScoreDump:
    """Scores of every candidate pair of one input graph before any edit."""

    record_id: str
    pairs: list[Pair]
    scores: np.ndarray
    eligible: np.ndarray
    gold: frozenset[Pair]

    def top_pairs(self, k: int) -> set[Pair]:
        return {self.pairs[i] for i in select_top_k(self.scores, self.eligible, k)}

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.record_id,
            "pairs": [list(p) for p in self.pairs],
            "scores": self.scores.tolist(),
            "eligible": self.eligible.astype(int).tolist(),
            "gold": sorted(list(p) for p in self.gold),
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> ScoreDump:
        return cls(
            record_id=data["id"],
            pairs=[(int(i), int(j)) for i, j in data["pairs"]],
            scores=np.asarray(data["scores"], dtype=np.float64),
            eligible=np.asarray(data["eligible"], dtype=bool),
            gold=frozenset((int(i), int(j)) for i, j in data["gold"]),
        )


def score_dump(model: ReactionModel, record: ReactionRecord) -> ScoreDump:
    tape = model.new_tape(record=False)
    state = model.initial_state(tape, record.input_graph)
    obs = model.observe(tape, state)
    return ScoreDump(
        record_id=record.record_id,
        pairs=list(obs.scored.candidates.pairs),
        scores=np.array(obs.scored.values, dtype=np.float64),
        eligible=obs.scored.candidates.eligible.copy(),
        gold=record.gold_pairs,
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def coverage_at_k(dumps: Sequence[ScoreDump], k: int) -> float:
    """Fraction of reactions with all gold pairs in the top k; no gold pairs counts as covered."""
    if not dumps:
        return 0.0
    hits = sum(1 for d in dumps if d.gold <= d.top_pairs(k))
    return hits / len(dumps)


def recall_at_k(dumps: Sequence[ScoreDump], k: int) -> float:
    """Fraction of all gold pairs that are in their reaction's top k."""
    total = sum(len(d.gold) for d in dumps)
    if total == 0:
        return 1.0
    found = sum(len(d.gold & d.top_pairs(k)) for d in dumps)
    return found / total


def precision_at_k(ranks: Sequence[int | None], k: int) -> float:
    """``ranks`` holds the 1-based rank of the first correct candidate per reaction."""
    if not ranks:
        return 0.0
    return sum(1 for r in ranks if r is not None and r <= k) / len(ranks)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


class ReactionOutcome(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    gold_length: int
    predicted_length: int | None = Field(default=None, description="Edit count of the top raw candidate")
    rank: dict[str, int | None] = Field(default_factory=dict, description="First correct rank per post-processing variant")
    first_wrong: str | None = Field(default=None, description="First wrong sub-action of an argmax supervised rollout")
    symmetry_error: bool = False


class ErrorAnalysis(BaseModel):
    model_config = ConfigDict(extra="forbid")

    top1_by_gold_length: dict[int, float] = Field(default_factory=dict)
    length_errors: dict[str, int] = Field(default_factory=lambda: {"shorter": 0, "same": 0, "longer": 0})
    first_wrong: dict[str, int] = Field(default_factory=dict)
    symmetry_errors: int = 0


class MetricReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_reactions: int
    beam_width: int
    coverage: dict[int, float]
    recall: dict[int, float]
    precision: dict[str, dict[int, float]]
    analysis: ErrorAnalysis
    outcomes: list[ReactionOutcome]


def _is_symmetry_error(candidates: Sequence[Candidate], rank: int | None) -> bool:
    if rank is None or rank == 1 or not candidates:
        return False
    return abs(candidates[rank - 1].score - candidates[0].score) <= SYMMETRY_TOLERANCE


def analyse(outcomes: Iterable[ReactionOutcome], variant: str = "both") -> ErrorAnalysis:
    analysis = ErrorAnalysis()
    by_length: dict[int, list[bool]] = defaultdict(list)
    kinds: Counter[str] = Counter()
    for o in outcomes:
        correct = o.rank.get(variant) == 1
        by_length[o.gold_length].append(correct)
        if o.first_wrong is not None:
            kinds[o.first_wrong] += 1
        if o.symmetry_error:
            analysis.symmetry_errors += 1
        if correct or o.predicted_length is None:
            continue
        if o.predicted_length < o.gold_length:
            analysis.length_errors["shorter"] += 1
        elif o.predicted_length > o.gold_length:
            analysis.length_errors["longer"] += 1
        else:
            analysis.length_errors["same"] += 1
    analysis.top1_by_gold_length = {n: sum(v) / len(v) for n, v in sorted(by_length.items())}
    analysis.first_wrong = dict(sorted(kinds.items()))
    return analysis


def evaluate(
    model: ReactionModel,
    records: Sequence[ReactionRecord],
    beam_width: int | None = None,
    coverage_ks: Sequence[int] = DEFAULT_COVERAGE_KS,
    precision_ks: Sequence[int] = DEFAULT_PRECISION_KS,
    progress: bool = False,
    trace: JsonlWriter | None = None,
) -> MetricReport:
    """Score, decode and analyse every record.

    With ``trace`` the argmax supervised rollout of each record is written one
    step per line.
    """
    if not records:
        msg = "cannot evaluate on an empty dataset"
        raise DataError(msg)
    width = model.config.beam_width if beam_width is None else beam_width
    dumps: list[ScoreDump] = []
    outcomes: list[ReactionOutcome] = []
    ranks: dict[str, list[int | None]] = {name: [] for name in POSTPROCESS_VARIANTS}

    for record in tqdm(records, desc="eval", disable=not progress):
        dumps.append(score_dump(model, record))
        raw = beam_search(model, record.input_graph, width)
        outcome = ReactionOutcome(
            id=record.record_id,
            gold_length=record.num_changes,
            predicted_length=raw[0].length if raw else None,
        )
        for name, (remove_invalid, dedup) in POSTPROCESS_VARIANTS.items():
            ranked = postprocess(raw, remove_invalid=remove_invalid, dedup=dedup)
            rank = gold_rank(ranked, record)
            ranks[name].append(rank)
            outcome.rank[name] = rank
            if name == "both":
                outcome.symmetry_error = _is_symmetry_error(ranked, rank)
        episode = rollout_supervised(model, model.new_tape(record=False), record)
        outcome.first_wrong = episode.first_wrong_kind()
        if trace is not None:
            for row in episode.trace():
                trace.write(row)
        outcomes.append(outcome)

    report = MetricReport(
        num_reactions=len(records),
        beam_width=width,
        coverage={k: coverage_at_k(dumps, k) for k in coverage_ks},
        recall={k: recall_at_k(dumps, k) for k in coverage_ks},
        precision={name: {k: precision_at_k(r, k) for k in precision_ks} for name, r in ranks.items()},
        analysis=analyse(outcomes),
        outcomes=outcomes,
    )
    logger.info(
        "evaluated %d reaction(s): P@1 %.3f (raw %.3f), coverage@%d %.3f",
        len(records),
        report.precision["both"].get(1, 0.0),
        report.precision["raw"].get(1, 0.0),
        coverage_ks[-1],
        report.coverage[coverage_ks[-1]],
    )
    return report


def validation_precision(model: ReactionModel, records: Sequence[ReactionRecord], beam_width: int | None = None) -> float:
    """Precision@1 after invalid removal and dedup; drives the learning-rate schedule."""
    ranks = []
    for record in records:
        ranked = postprocess(beam_search(model, record.input_graph, beam_width))
        ranks.append(gold_rank(ranked, record))
    return precision_at_k(ranks, 1)
