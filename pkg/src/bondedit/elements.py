"""Element vocabulary and maximum-valence table.

The atom vocabulary is fixed at 72 entries; an element outside it cannot be
embedded. The valence table covers the common organic elements explicitly and
can be extended or overridden from a JSON file (symbol -> max valence).
"""

from __future__ import annotations

import json
from pathlib import Path

from bondedit.errors import ConfigError, UnknownElementError, VocabularyError

# ---------------------------------------------------------------------------
# Periodic table subset
# ---------------------------------------------------------------------------

# Every element the parser accepts inside brackets (Z = 1..92).
_SYMBOLS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U"
).split()

ATOMIC_NUMBER: dict[str, int] = {sym: z for z, sym in enumerate(_SYMBOLS, start=1)}
SYMBOL: dict[int, str] = {z: sym for sym, z in ATOMIC_NUMBER.items()}

# Embedding vocabulary, ordered by frequency in patent reaction data.
VOCABULARY_SYMBOLS: tuple[str, ...] = (
    "C", "N", "O", "S", "F", "Si", "P", "Cl", "Br", "Mg",
    "Na", "Ca", "Fe", "As", "Al", "I", "B", "V", "K", "Tl",
    "Yb", "Sb", "Sn", "Ag", "Pd", "Co", "Se", "Ti", "Zn", "H",
    "Li", "Ge", "Cu", "Au", "Ni", "Cd", "In", "Mn", "Zr", "Cr",
    "Pt", "Hg", "Pb", "W", "Ru", "Nb", "Re", "Te", "Rh", "Tc",
    "Ba", "Bi", "Hf", "Mo", "U", "Sm", "Os", "Ir", "Ce", "Gd",
    "Ga", "Cs", "Be", "Sc", "Rb", "Sr", "Y", "La", "Pr", "Nd",
    "Ta", "Th",
)
VOCABULARY_SIZE = len(VOCABULARY_SYMBOLS)
assert VOCABULARY_SIZE == 72

_VOCAB_INDEX: dict[int, int] = {ATOMIC_NUMBER[s]: i for i, s in enumerate(VOCABULARY_SYMBOLS)}


def atomic_number(symbol: str) -> int:
    """Return Z for a capitalised element symbol."""
    try:
        return ATOMIC_NUMBER[symbol]
    except KeyError:
        raise UnknownElementError(symbol) from None


def symbol_of(z: int) -> str:
    try:
        return SYMBOL[z]
    except KeyError:
        raise UnknownElementError(str(z)) from None


def vocabulary_index(z: int) -> int:
    """Row of element ``z`` in the atom embedding table."""
    try:
        return _VOCAB_INDEX[z]
    except KeyError:
        msg = f"element Z={z} is outside the {VOCABULARY_SIZE}-entry atom vocabulary"
        raise VocabularyError(msg) from None


# ---------------------------------------------------------------------------
# Valence
# ---------------------------------------------------------------------------

DEFAULT_MAX_VALENCE: dict[str, int] = {
    "H": 1, "B": 3, "C": 4, "N": 3, "O": 2, "F": 1, "Si": 4, "P": 5, "S": 6,
    "Cl": 1, "Br": 1, "I": 1, "Se": 6, "As": 5, "Li": 1, "Na": 1, "K": 1,
    "Mg": 2, "Al": 3, "Zn": 2, "Sn": 4, "Ge": 4,
}

# How a formal charge moves the allowed valence.
#   +1: positive charge raises the limit (onium ions, N+ = 4)
#   -1: negative charge raises the limit (borates, B- = 4)
#    0: |charge| lowers the limit (carbocations/carbanions, C+/- = 3)
CHARGE_DIRECTION: dict[str, int] = {
    "N": 1, "P": 1, "O": 1, "S": 1, "Se": 1, "As": 1,
    "B": -1, "Al": -1,
    "C": 0, "Si": 0,
}


class ValenceTable:
    """Maximum valence per element, with charge adjustment.

    Elements missing from the table are unconstrained.
    """

    def __init__(self, limits: dict[str, int] | None = None) -> None:
        self._limits: dict[int, int] = {}
        for sym, limit in (limits if limits is not None else DEFAULT_MAX_VALENCE).items():
            self._limits[atomic_number(sym)] = int(limit)

    @classmethod
    def from_file(cls, path: Path) -> ValenceTable:
        """Load overrides from a JSON object ``{"C": 4, ...}`` merged over the defaults."""
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            msg = f"cannot read valence table {path}: {exc}"
            raise ConfigError(msg) from exc
        if not isinstance(data, dict) or not all(isinstance(v, int) for v in data.values()):
            msg = f"valence table {path} must map element symbols to integers"
            raise ConfigError(msg)
        merged = dict(DEFAULT_MAX_VALENCE)
        merged.update(data)
        return cls(merged)

    def max_valence(self, z: int, charge: int = 0) -> int | None:
        base = self._limits.get(z)
        if base is None:
            return None
        if charge == 0:
            return base
        direction = CHARGE_DIRECTION.get(SYMBOL.get(z, ""))
        if direction == 1:
            return base + charge
        if direction == -1:
            return base - charge
        if direction == 0:
            return base - abs(charge)
        return base
