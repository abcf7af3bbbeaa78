"""Restricted SMILES reader and writer.

Supported: organic-subset atoms (B C N O P S F Cl Br I), aromatic lowercase
atoms (b c n o p s), bracket atoms with element, H count, charge and atom-map
number, bonds ``- = # :``, branches, ring closures (digits and ``%nn``) and
``.``-separated components.

Rejected with ``UnsupportedSmilesFeature``: isotopes, tetrahedral and
directional-bond stereo, quadruple bonds and wildcard atoms.

Unbracketed atoms carry no explicit hydrogens; implicit hydrogens are not
materialised, matching how edit-based reaction models featurise atoms.
"""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass

from bondedit.elements import ATOMIC_NUMBER, SYMBOL
from bondedit.errors import SmilesError, SmilesSyntaxError, UnknownElementError, UnsupportedSmilesFeature
from bondedit.molgraph import Atom, BondType, MolGraph, Pair, canonical_pair

ORGANIC_SUBSET = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_SUBSET = ("b", "c", "n", "o", "p", "s")
MAX_RING_LABEL = 99
# lowercase symbols accepted inside brackets
AROMATIC_BRACKET = ("se", "as", "te", "b", "c", "n", "o", "p", "s")
# elements that may be written lowercase when they carry aromatic bonds
_WRITABLE_AROMATIC = {ATOMIC_NUMBER[s.capitalize()] for s in AROMATIC_BRACKET}

_BOND_SYMBOLS = {"-": BondType.SINGLE, "=": BondType.DOUBLE, "#": BondType.TRIPLE, ":": BondType.AROMATIC}
_BOND_TEXT = {BondType.SINGLE: "-", BondType.DOUBLE: "=", BondType.TRIPLE: "#", BondType.AROMATIC: ":"}


# ---------------------------------------------------------------------------
# Reader
# ---------------------------------------------------------------------------


@dataclass
class _RingOpening:
    atom: int
    bond: BondType | None
    offset: int


class _Reader:
    """Single-pass SMILES reader producing atoms and a bond store."""

    def __init__(self, text: str) -> None:
        self.text = text
        self.pos = 0
        self.atoms: list[Atom] = []
        self.aromatic: list[bool] = []
        self.bonds: dict[Pair, BondType] = {}
        self.rings: dict[int, _RingOpening] = {}

    # ─── helpers ─────────────────────────────────────────────────────

    def offset(self, pos: int | None = None) -> int:
        """Byte offset of character position ``pos``."""
        p = self.pos if pos is None else pos
        return len(self.text[:p].encode("utf-8"))

    def syntax(self, message: str, pos: int | None = None) -> SmilesSyntaxError:
        off = self.offset(pos)
        return SmilesSyntaxError(f"{message} at offset {off}", off)

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def read_int(self) -> int | None:
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        return int(self.text[start:self.pos]) if self.pos > start else None

    # ─── grammar ─────────────────────────────────────────────────────

    def parse(self) -> MolGraph:
        if not self.text:
            return MolGraph.empty()
        prev: int | None = None
        pending: BondType | None = None
        pending_pos = 0
        branches: list[int | None] = []
        expect_atom = True  # start of a component

        while self.pos < len(self.text):
            ch = self.text[self.pos]
            if ch == ".":
                if pending is not None or expect_atom:
                    raise self.syntax("empty component or dangling bond before '.'")
                if branches:
                    raise self.syntax("'.' inside an open branch")
                prev = None
                expect_atom = True
                self.pos += 1
            elif ch in _BOND_SYMBOLS:
                if pending is not None:
                    raise self.syntax("two consecutive bond symbols")
                if prev is None:
                    raise self.syntax("bond symbol without a preceding atom")
                pending = _BOND_SYMBOLS[ch]
                pending_pos = self.pos
                self.pos += 1
            elif ch in "/\\":
                raise UnsupportedSmilesFeature("directional bond (stereo)", self.offset())
            elif ch == "$":
                raise UnsupportedSmilesFeature("quadruple bond", self.offset())
            elif ch == "(":
                if prev is None:
                    raise self.syntax("branch without a preceding atom")
                if pending is not None:
                    raise self.syntax("bond symbol before '('")
                branches.append(prev)
                self.pos += 1
                if self.peek() == ")":
                    raise self.syntax("empty branch")
            elif ch == ")":
                if not branches:
                    raise self.syntax("unmatched ')'")
                if pending is not None:
                    raise self.syntax("dangling bond before ')'")
                prev = branches.pop()
                self.pos += 1
            elif ch.isdigit() or ch == "%":
                if prev is None:
                    raise self.syntax("ring closure without a preceding atom")
                self.ring_closure(prev, pending)
                pending = None
            else:
                idx = self.atom()
                if prev is not None:
                    bond = pending if pending is not None else self.default_bond(prev, idx)
                    self.bonds[canonical_pair(prev, idx)] = bond
                elif pending is not None:
                    raise self.syntax("bond symbol without a preceding atom", pending_pos)
                pending = None
                prev = idx
                expect_atom = False

        if pending is not None:
            raise self.syntax("dangling bond at end of input", pending_pos)
        if branches:
            raise self.syntax("unclosed branch '('")
        if self.rings:
            number, opening = next(iter(self.rings.items()))
            off = opening.offset
            raise SmilesSyntaxError(f"ring closure {number} never closed at offset {off}", off)
        if expect_atom:
            raise self.syntax("empty component at end of input")
        return MolGraph.build(self.atoms, self.bonds)

    def default_bond(self, i: int, j: int) -> BondType:
        return BondType.AROMATIC if self.aromatic[i] and self.aromatic[j] else BondType.SINGLE

    def ring_closure(self, atom: int, bond: BondType | None) -> None:
        start = self.pos
        if self.text[self.pos] == "%":
            digits = self.text[self.pos + 1:self.pos + 3]
            if len(digits) != 2 or not digits.isdigit():
                raise self.syntax("'%' must be followed by two digits")
            number = int(digits)
            self.pos += 3
        else:
            number = int(self.text[self.pos])
            self.pos += 1
        opening = self.rings.pop(number, None)
        if opening is None:
            self.rings[number] = _RingOpening(atom, bond, self.offset(start))
            return
        if opening.atom == atom:
            raise self.syntax(f"ring closure {number} bonds an atom to itself", start)
        if opening.bond is not None and bond is not None and opening.bond is not bond:
            raise self.syntax(f"conflicting bond symbols on ring closure {number}", start)
        chosen = bond or opening.bond or self.default_bond(opening.atom, atom)
        pair = canonical_pair(opening.atom, atom)
        if pair in self.bonds:
            raise self.syntax(f"ring closure {number} duplicates an existing bond", start)
        self.bonds[pair] = chosen

    def atom(self) -> int:
        if self.text[self.pos] == "[":
            return self.bracket_atom()
        start = self.pos
        for sym in ORGANIC_SUBSET:
            if self.text.startswith(sym, self.pos):
                self.pos += len(sym)
                return self.add_atom(Atom(element=ATOMIC_NUMBER[sym]), aromatic=False)
        for sym in AROMATIC_SUBSET:
            if self.text.startswith(sym, self.pos):
                self.pos += 1
                return self.add_atom(Atom(element=ATOMIC_NUMBER[sym.upper()]), aromatic=True)
        ch = self.text[start]
        if ch == "*":
            raise UnsupportedSmilesFeature("wildcard atom '*'", self.offset())
        if ch.isalpha():
            raise UnknownElementError(ch, self.offset())
        raise self.syntax(f"unexpected character {ch!r}")

    def bracket_atom(self) -> int:
        open_pos = self.pos
        self.pos += 1
        close = self.text.find("]", self.pos)
        if close < 0:
            raise self.syntax("unclosed '['", open_pos)
        if self.peek().isdigit():
            raise UnsupportedSmilesFeature("isotope", self.offset())

        sym_pos = self.pos
        if self.peek() == "*":
            raise UnsupportedSmilesFeature("wildcard atom '*'", self.offset())
        element, aromatic = self.bracket_symbol()

        if self.peek() == "@":
            raise UnsupportedSmilesFeature("chirality (stereo)", self.offset())

        h_count = 0
        if self.peek() == "H":
            self.pos += 1
            n = self.read_int()
            h_count = 1 if n is None else n

        charge = 0
        if self.peek() in "+-":
            sign = 1 if self.peek() == "+" else -1
            ch = self.peek()
            self.pos += 1
            n = self.read_int()
            if n is not None:
                charge = sign * n
            else:
                count = 1
                while self.peek() == ch:
                    count += 1
                    self.pos += 1
                charge = sign * count

        map_number = None
        if self.peek() == ":":
            self.pos += 1
            n = self.read_int()
            if n is None:
                raise self.syntax("':' in bracket atom must be followed by a map number")
            if n <= 0:
                raise self.syntax("atom map numbers must be positive", sym_pos)
            map_number = n

        if self.pos != close:
            raise self.syntax(f"unexpected {self.peek()!r} in bracket atom")
        self.pos = close + 1
        return self.add_atom(
            Atom(element=element, charge=charge, explicit_h_count=h_count, map_number=map_number),
            aromatic=aromatic,
        )

    def bracket_symbol(self) -> tuple[int, bool]:
        for sym in AROMATIC_BRACKET:
            if self.text.startswith(sym, self.pos):
                self.pos += len(sym)
                return ATOMIC_NUMBER[sym.capitalize()], True
        ch = self.peek()
        if not ch.isalpha() or not ch.isupper():
            raise self.syntax("expected element symbol in bracket atom")
        two = self.text[self.pos:self.pos + 2]
        if len(two) == 2 and two[1].islower() and two in ATOMIC_NUMBER:
            self.pos += 2
            return ATOMIC_NUMBER[two], False
        if ch in ATOMIC_NUMBER:
            self.pos += 1
            return ATOMIC_NUMBER[ch], False
        symbol = two if len(two) == 2 and two[1].islower() else ch
        raise UnknownElementError(symbol, self.offset())

    def add_atom(self, atom: Atom, aromatic: bool) -> int:
        self.atoms.append(atom)
        self.aromatic.append(aromatic)
        return len(self.atoms) - 1


def parse_smiles(text: str) -> MolGraph:
    """Parse ``text`` into a ``MolGraph``.

    Raises ``SmilesSyntaxError`` (with byte offset), ``UnsupportedSmilesFeature``
    or ``UnknownElementError``.
    """
    return _Reader(text.strip()).parse()


def parse_components(text: str) -> list[MolGraph]:
    """Parse a '.'-joined SMILES list into one graph per listed fragment string."""
    return [parse_smiles(part) for part in text.split(".") if part]


# ---------------------------------------------------------------------------
# Writer
# ---------------------------------------------------------------------------


def _writes_aromatic(g: MolGraph, i: int) -> bool:
    atom = g.atoms[i]
    return atom.element in _WRITABLE_AROMATIC and any(
        g.bond(i, j) is BondType.AROMATIC for j in g.neighbors(i)
    )


def _atom_text(g: MolGraph, i: int, aromatic: bool) -> str:
    atom = g.atoms[i]
    symbol = SYMBOL[atom.element]
    if aromatic:
        symbol = symbol.lower()
    plain = aromatic and symbol in AROMATIC_SUBSET or not aromatic and symbol in ORGANIC_SUBSET
    if plain and atom.charge == 0 and atom.explicit_h_count == 0 and atom.map_number is None:
        return symbol
    text = "[" + symbol
    if atom.explicit_h_count:
        text += "H" if atom.explicit_h_count == 1 else f"H{atom.explicit_h_count}"
    if atom.charge:
        sign = "+" if atom.charge > 0 else "-"
        text += sign if abs(atom.charge) == 1 else f"{sign}{abs(atom.charge)}"
    if atom.map_number is not None:
        text += f":{atom.map_number}"
    return text + "]"


def _bond_text(bond: BondType, both_aromatic: bool) -> str:
    if both_aromatic:
        return "" if bond is BondType.AROMATIC else _BOND_TEXT[bond]
    return "" if bond is BondType.SINGLE else _BOND_TEXT[bond]


class _Writer:
    def __init__(self, g: MolGraph) -> None:
        self.g = g
        self.aromatic = [_writes_aromatic(g, i) for i in range(len(g))]
        self.visited: set[int] = set()
        self.children: dict[int, list[int]] = {}
        self.ring_open: dict[int, list[int]] = {}   # atom -> partners closing later
        self.ring_close: dict[int, list[int]] = {}  # atom -> partners opened earlier
        self.digits: dict[Pair, int] = {}

    def component(self, root: int) -> str:
        self.plan(root)
        return "".join(self.emit(root))

    def plan(self, root: int) -> None:
        """DFS spanning tree; non-tree bonds become ring closures."""
        stack: list[tuple[int, int | None]] = [(root, None)]
        order: list[int] = []
        parent: dict[int, int | None] = {}
        while stack:
            atom, par = stack.pop()
            if atom in self.visited:
                continue
            self.visited.add(atom)
            parent[atom] = par
            order.append(atom)
            if par is not None:
                self.children.setdefault(par, []).append(atom)
            for nb in reversed(self.g.neighbors(atom)):
                if nb not in self.visited:
                    stack.append((nb, atom))
        rank = {a: k for k, a in enumerate(order)}
        for atom in order:
            tree = set(self.children.get(atom, []))
            if parent[atom] is not None:
                tree.add(parent[atom])
            for nb in self.g.neighbors(atom):
                if nb in tree or rank[nb] < rank[atom]:
                    continue
                self.ring_open.setdefault(atom, []).append(nb)
                self.ring_close.setdefault(nb, []).append(atom)

    def emit(self, root: int) -> Iterator[str]:
        in_use: set[int] = set()
        # (atom, text before the atom, is-last-child flag handled by caller)
        stack: list[tuple[str, int | str]] = [("atom", root)]
        while stack:
            kind, item = stack.pop()
            if kind == "text":
                yield str(item)
                continue
            atom = int(item)
            yield _atom_text(self.g, atom, self.aromatic[atom])
            for partner in self.ring_close.get(atom, []):
                pair = canonical_pair(atom, partner)
                digit = self.digits.pop(pair)
                in_use.discard(digit)
                both = self.aromatic[atom] and self.aromatic[partner]
                yield _bond_text(self.g.bond(atom, partner), both) + _ring_label(digit)
            for partner in self.ring_open.get(atom, []):
                free = [d for d in range(1, MAX_RING_LABEL + 1) if d not in in_use]
                if not free:
                    msg = f"more than {MAX_RING_LABEL} ring closures open at once"
                    raise SmilesError(msg)
                digit = free[0]
                in_use.add(digit)
                self.digits[canonical_pair(atom, partner)] = digit
                yield _ring_label(digit)
            kids = self.children.get(atom, [])
            # push in reverse so the first child is emitted first
            for k, child in reversed(list(enumerate(kids))):
                both = self.aromatic[atom] and self.aromatic[child]
                bond = _bond_text(self.g.bond(atom, child), both)
                if k < len(kids) - 1:
                    stack.append(("text", ")"))
                    stack.append(("atom", child))
                    stack.append(("text", "(" + bond))
                else:
                    stack.append(("atom", child))
                    stack.append(("text", bond))


def _ring_label(digit: int) -> str:
    return str(digit) if digit < 10 else f"%{digit:02d}"


def write_smiles(g: MolGraph) -> str:
    """Serialise ``g``; components are written in order of their lowest atom id."""
    writer = _Writer(g)
    parts = [writer.component(comp[0]) for comp in g.components()] if len(g) else []
    return ".".join(parts)
