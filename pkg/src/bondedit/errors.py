"""Exception hierarchy for bondedit.

Every error raised on purpose by the library derives from ``BondEditError``
so the CLI can map families to exit statuses without catching bugs.
"""

from __future__ import annotations


class BondEditError(Exception):
    """Base class for all library errors."""


# ---------------------------------------------------------------------------
# SMILES
# ---------------------------------------------------------------------------


class SmilesError(BondEditError):
    """A SMILES string could not be turned into a graph."""

    def __init__(self, message: str, offset: int | None = None) -> None:
        super().__init__(message)
        self.offset = offset


class SmilesSyntaxError(SmilesError):
    """Malformed SMILES text."""


class UnsupportedSmilesFeature(SmilesError):
    """Valid SMILES that uses a construct outside the supported subset."""

    def __init__(self, construct: str, offset: int) -> None:
        super().__init__(f"unsupported SMILES feature '{construct}' at offset {offset}", offset)
        self.construct = construct


class UnknownElementError(SmilesError):
    """Element symbol not recognised."""

    def __init__(self, symbol: str, offset: int | None = None) -> None:
        where = f" at offset {offset}" if offset is not None else ""
        super().__init__(f"unknown element '{symbol}'{where}", offset)
        self.symbol = symbol


# ---------------------------------------------------------------------------
# Graphs and reactions
# ---------------------------------------------------------------------------


class GraphError(BondEditError):
    """Invalid operation on a molecular graph."""


class NoOpEditError(GraphError):
    """An edit that would leave the bond unchanged."""


class InvalidEditError(GraphError):
    """An edit that references a self-loop or a missing atom."""


class MappingError(BondEditError):
    """Atom-map numbers are inconsistent between input and product."""


class VocabularyError(BondEditError):
    """Element outside the fixed atom vocabulary."""


class ActionError(BondEditError):
    """An action that the environment cannot take."""


# ---------------------------------------------------------------------------
# Numerics
# ---------------------------------------------------------------------------


class ShapeError(BondEditError):
    """Operand shapes are incompatible for a primitive."""


class NonFiniteError(BondEditError):
    """A primitive produced NaN or Inf."""

    def __init__(self, op: str) -> None:
        super().__init__(f"non-finite value produced by '{op}'")
        self.op = op


class TapeError(BondEditError):
    """Misuse of the gradient tape."""


# ---------------------------------------------------------------------------
# Harness
# ---------------------------------------------------------------------------


class ConfigError(BondEditError):
    """Malformed configuration or override."""


class DataError(BondEditError):
    """Malformed reaction data file."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None) -> None:
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class CheckpointError(BondEditError):
    """Checkpoint cannot be read or does not match the configuration."""


class InfeasibleSpecError(BondEditError):
    """The toy task settings cannot be satisfied."""


class TrainingDivergedError(BondEditError):
    """Training produced a non-finite loss."""
