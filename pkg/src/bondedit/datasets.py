"""Reaction file ingestion and writing.

Two formats are read:

* Format A, one reaction per line: ``reactants>reagents>products``; each field
  is a '.'-joined SMILES list with atom-map numbers. Anything after the first
  whitespace is ignored. Reagent atoms are taken from the middle field.
* Format B, JSON lines: explicit atom and bond arrays for input and product
  graphs (see ``docs/DATA_FORMATS.md``). Synthetic data is written in this
  format.

Records whose derived edits touch a reagent atom are skipped with a warning.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Iterator
from dataclasses import replace
from pathlib import Path
from typing import Annotated

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from bondedit.elements import ATOMIC_NUMBER, SYMBOL
from bondedit.errors import BondEditError, DataError
from bondedit.logs import dumps
from bondedit.molgraph import (
    Atom,
    BondType,
    MolGraph,
    ReactionRecord,
    ReactionTriple,
    extract_triples,
)
from bondedit.smiles import parse_smiles, write_smiles

logger = logging.getLogger(__name__)

FORMAT_B_SUFFIXES = {".jsonl", ".json"}

# ---------------------------------------------------------------------------
# Format B schema
# ---------------------------------------------------------------------------


class AtomModel(BaseModel):
    """One atom of a format-B graph."""

    model_config = ConfigDict(extra="forbid")

    element: Annotated[str, Field(description="Element symbol, e.g. 'C' or 'Cl'")]
    charge: Annotated[int, Field(default=0, description="Formal charge")]
    h: Annotated[int, Field(default=0, ge=0, description="Explicit hydrogen count")]
    map: Annotated[int | None, Field(default=None, gt=0, description="Atom-map number")]
    reagent: Annotated[bool, Field(default=False, description="Atom belongs to a reagent molecule")]


class GraphModel(BaseModel):
    """Atoms plus bonds as ``[i, j, "SINGLE"]`` triples."""

    model_config = ConfigDict(extra="forbid")

    atoms: list[AtomModel]
    bonds: list[tuple[int, int, str]] = Field(default_factory=list)


class RecordModel(BaseModel):
    """One format-B reaction."""

    model_config = ConfigDict(extra="forbid")

    id: Annotated[str, Field(default="", description="Record identifier")]
    input: GraphModel
    product: GraphModel
    edits: Annotated[
        list[tuple[int, int, str]] | None,
        Field(default=None, description="Optional gold edits; checked against the derived set"),
    ]


def graph_from_model(model: GraphModel) -> MolGraph:
    atoms = []
    for a in model.atoms:
        if a.element not in ATOMIC_NUMBER:
            msg = f"unknown element {a.element!r}"
            raise DataError(msg)
        atoms.append(
            Atom(
                element=ATOMIC_NUMBER[a.element],
                charge=a.charge,
                explicit_h_count=a.h,
                map_number=a.map,
                is_reagent=a.reagent,
            )
        )
    return MolGraph.build(atoms, [(i, j, BondType.parse(b)) for i, j, b in model.bonds])


def graph_to_model(g: MolGraph) -> GraphModel:
    return GraphModel(
        atoms=[
            AtomModel(
                element=SYMBOL[a.element],
                charge=a.charge,
                h=a.explicit_h_count,
                map=a.map_number,
                reagent=a.is_reagent,
            )
            for a in g.atoms
        ],
        bonds=[(i, j, b.name) for (i, j), b in g.bonds.items()],
    )


# ---------------------------------------------------------------------------
# Record assembly
# ---------------------------------------------------------------------------


def disjoint_union(graphs: Iterable[tuple[MolGraph, bool]]) -> MolGraph:
    """Concatenate graphs; the flag marks every atom of that graph as reagent."""
    atoms: list[Atom] = []
    bonds: list[tuple[int, int, BondType]] = []
    for g, reagent in graphs:
        base = len(atoms)
        atoms.extend(replace(a, is_reagent=a.is_reagent or reagent) for a in g.atoms)
        bonds.extend((base + i, base + j, b) for (i, j), b in g.bonds.items())
    return MolGraph.build(atoms, bonds)


def make_record(input_graph: MolGraph, product: MolGraph, record_id: str = "") -> ReactionRecord | None:
    """Derive gold edits; ``None`` (with a warning) if an edit touches a reagent."""
    triples = extract_triples(input_graph, product)
    reagents = input_graph.reagent_atoms()
    touched = sorted(t.pair for t in triples if t.u in reagents or t.v in reagents)
    if touched:
        logger.warning("skipping reaction %s: gold edits touch reagent atoms %s", record_id or "?", touched)
        return None
    return ReactionRecord(input_graph, product, triples, record_id)


def parse_reaction_smiles(text: str, record_id: str = "") -> ReactionRecord | None:
    """Parse one format-A reaction string."""
    fields = text.split(">")
    if len(fields) != 3:
        msg = f"expected 'reactants>reagents>products', got {len(fields)} field(s)"
        raise DataError(msg)
    reactants, reagents, products = fields
    parts: list[tuple[MolGraph, bool]] = [(parse_smiles(reactants), False)]
    if reagents.strip():
        parts.append((parse_smiles(reagents), True))
    return make_record(disjoint_union(parts), parse_smiles(products), record_id)


def record_to_reaction_smiles(record: ReactionRecord) -> str:
    g = record.input_graph
    reactant_ids = [i for i, a in enumerate(g.atoms) if not a.is_reagent]
    reagent_ids = [i for i, a in enumerate(g.atoms) if a.is_reagent]
    reactants = write_smiles(g.subgraph(reactant_ids))
    reagents = write_smiles(g.subgraph(reagent_ids)) if reagent_ids else ""
    return f"{reactants}>{reagents}>{write_smiles(record.product_graph)}"


def record_from_model(model: RecordModel) -> ReactionRecord | None:
    input_graph = graph_from_model(model.input)
    product = graph_from_model(model.product)
    record = make_record(input_graph, product, model.id)
    if record is not None and model.edits is not None:
        stated = frozenset(ReactionTriple.of(i, j, BondType.parse(b)) for i, j, b in model.edits)
        if stated != record.gold_triples:
            msg = f"record {model.id!r}: stated edits disagree with the edits derived from atom maps"
            raise DataError(msg)
    return record


def record_to_model(record: ReactionRecord) -> RecordModel:
    return RecordModel(
        id=record.record_id,
        input=graph_to_model(record.input_graph),
        product=graph_to_model(record.product_graph),
        edits=[(t.u, t.v, t.new_bond.name) for t in sorted(record.gold_triples)],
    )


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def _iter_format_a(path: Path) -> Iterator[ReactionRecord]:
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            reaction = text.split()[0]
            try:
                record = parse_reaction_smiles(reaction, record_id=f"{path.stem}:{lineno}")
            except BondEditError as exc:
                raise DataError(str(exc), str(path), lineno) from exc
            if record is not None:
                yield record


def _iter_format_b(path: Path) -> Iterator[ReactionRecord]:
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                model = RecordModel.model_validate(json.loads(line))
                record = record_from_model(model)
            except (json.JSONDecodeError, ValidationError) as exc:
                msg = f"invalid record: {exc}"
                raise DataError(msg, str(path), lineno) from exc
            except BondEditError as exc:
                raise DataError(str(exc), str(path), lineno) from exc
            if record is not None:
                yield record


def load_records(path: Path) -> list[ReactionRecord]:
    """Load a format-A or format-B file (chosen by suffix)."""
    if not path.exists():
        msg = "file not found"
        raise DataError(msg, str(path))
    reader = _iter_format_b if path.suffix in FORMAT_B_SUFFIXES else _iter_format_a
    records = list(reader(path))
    logger.info("loaded %d reaction(s) from %s", len(records), path)
    return records


def write_records(path: Path, records: Iterable[ReactionRecord]) -> int:
    """Write format-B JSON lines with sorted keys (byte-stable for equal input)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(dumps(record_to_model(record).model_dump()) + "\n")
            count += 1
    return count


def convert_file(src: Path, dst: Path) -> int:
    """Rewrite any supported reaction file as format B."""
    return write_records(dst, load_records(src))
