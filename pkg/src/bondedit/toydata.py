"""Synthetic reaction datasets for desk-scale experiments.

Graphs are random connected molecules over a small element alphabet (no
hydrogens, single bonds). The gold edits are a deterministic function of the
graph, so a model can learn them:

* ``degree_sum``: non-bonded pairs whose atoms both have a free valence are
  ranked by ``(deg(u) + deg(v), labels, u, v)`` and the first ``changes`` of
  them become single bonds, skipping any pair that would exceed a valence
  given the pairs already taken;
* ``degree_sum_break``: the bond with the largest degree sum is broken first
  (ties by labels, then ids), the remaining changes follow ``degree_sum``.

A record with zero changes is a no-reaction example: product equals input.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from tqdm import tqdm

from bondedit.config import ToyTaskSpec
from bondedit.datasets import make_record, write_records
from bondedit.elements import atomic_number
from bondedit.errors import InfeasibleSpecError
from bondedit.molgraph import Atom, BondType, MolGraph, Pair, ReactionRecord, ReactionTriple, apply_all

logger = logging.getLogger(__name__)

TOY_ELEMENTS = ("C", "N", "O", "S", "P", "Si")
TOY_VALENCE = {"C": 4, "N": 3, "O": 2, "S": 2, "P": 3, "Si": 4}
SPLITS = ("train", "valid", "test")
MAX_ATTEMPTS = 100


def _capacity(g: MolGraph, labels: list[str]) -> list[int]:
    return [TOY_VALENCE[labels[i]] - len(g.neighbors(i)) for i in range(len(g))]


def random_graph(rng: np.random.Generator, spec: ToyTaskSpec) -> tuple[MolGraph, list[str]]:
    """A random connected graph: a spanning tree plus a few extra bonds."""
    n = int(rng.integers(spec.min_nodes, spec.max_nodes + 1))
    alphabet = TOY_ELEMENTS[: spec.num_labels]
    labels = [alphabet[int(rng.integers(len(alphabet)))] for _ in range(n)]
    spare = [TOY_VALENCE[s] for s in labels]
    bonds: set[Pair] = set()
    for i in range(1, n):
        # the newest atom always has a free valence, so options is never empty
        options = [j for j in range(i) if spare[j] > 1] or [j for j in range(i) if spare[j] > 0]
        j = options[int(rng.integers(len(options)))]
        bonds.add((j, i))
        spare[i] -= 1
        spare[j] -= 1
    extra = int(rng.integers(0, n // 3 + 1))
    for _ in range(extra):
        u, v = sorted(int(x) for x in rng.choice(n, size=2, replace=False))
        if (u, v) not in bonds and spare[u] > 1 and spare[v] > 1:
            bonds.add((u, v))
            spare[u] -= 1
            spare[v] -= 1
    atoms = [Atom(element=atomic_number(s), map_number=k + 1) for k, s in enumerate(labels)]
    return MolGraph.build(atoms, {p: BondType.SINGLE for p in bonds}), labels


def _pair_key(g: MolGraph, labels: list[str], pair: Pair) -> tuple[int, str, str, int, int]:
    u, v = pair
    a, b = sorted((labels[u], labels[v]))
    return (len(g.neighbors(u)) + len(g.neighbors(v)), a, b, u, v)


def _break_key(g: MolGraph, labels: list[str], pair: Pair) -> tuple[int, str, str, int, int]:
    degree_sum, *rest = _pair_key(g, labels, pair)
    return (-degree_sum, *rest)


def toy_edits(g: MolGraph, labels: list[str], changes: int, rule: str) -> list[ReactionTriple] | None:
    """The gold edits for ``g``, or None if the graph cannot supply ``changes`` of them."""
    if changes == 0:
        return []
    edits: list[ReactionTriple] = []
    if rule == "degree_sum_break":
        if not g.bonds:
            return None
        u, v = min(g.bonds, key=lambda p: _break_key(g, labels, p))
        edits.append(ReactionTriple.of(u, v, BondType.NULL))
    spare = _capacity(g, labels)
    for triple in edits:
        spare[triple.u] += 1
        spare[triple.v] += 1
    n = len(g)
    free = sorted(
        ((u, v) for u in range(n) for v in range(u + 1, n) if g.bond(u, v) is BondType.NULL),
        key=lambda p: _pair_key(g, labels, p),
    )
    for u, v in free:
        if len(edits) == changes:
            break
        if spare[u] > 0 and spare[v] > 0:
            edits.append(ReactionTriple.of(u, v, BondType.SINGLE))
            spare[u] -= 1
            spare[v] -= 1
    return edits if len(edits) == changes else None


def toy_record(rng: np.random.Generator, spec: ToyTaskSpec, record_id: str) -> ReactionRecord:
    changes = int(rng.integers(spec.min_changes, spec.max_changes + 1))
    for _ in range(MAX_ATTEMPTS):
        g, labels = random_graph(rng, spec)
        edits = toy_edits(g, labels, changes, spec.rule)
        if edits is None:
            continue
        record = make_record(g, apply_all(g, edits), record_id)
        assert record is not None
        return record
    msg = f"could not draw a graph with {changes} change(s) under rule {spec.rule!r} in {MAX_ATTEMPTS} attempts"
    raise InfeasibleSpecError(msg)


def _check_feasible(spec: ToyTaskSpec) -> None:
    n = spec.max_nodes
    available = n * (n - 1) // 2 - (n - 1)
    if spec.rule == "degree_sum_break":
        available += 1
    if spec.min_changes > available:
        msg = f"{spec.min_changes} change(s) cannot fit in graphs of at most {n} atoms"
        raise InfeasibleSpecError(msg)


def gen_toy_dataset(spec: ToyTaskSpec, progress: bool = False) -> dict[str, list[ReactionRecord]]:
    """Train, valid and test records, reproducible from ``spec.seed``."""
    _check_feasible(spec)
    rng = np.random.default_rng(spec.seed)
    sizes = {"train": spec.train_size, "valid": spec.valid_size, "test": spec.test_size}
    out: dict[str, list[ReactionRecord]] = {}
    for split in SPLITS:
        out[split] = [
            toy_record(rng, spec, f"{split}-{k:05d}")
            for k in tqdm(range(sizes[split]), desc=split, disable=not progress)
        ]
    return out


def write_toy_dataset(spec: ToyTaskSpec, out_dir: Path, progress: bool = False) -> dict[str, Path]:
    paths = {}
    for split, records in gen_toy_dataset(spec, progress).items():
        path = out_dir / f"{split}.jsonl"
        write_records(path, records)
        paths[split] = path
    logger.info("wrote toy dataset to %s (%d train, %d valid, %d test)", out_dir, spec.train_size, spec.valid_size, spec.test_size)
    return paths
