"""Restricted SMILES parsing and 2048-bit circular (Morgan-style) fingerprints.

Supported grammar: organic-subset atoms ``B C N O P S F Cl Br I`` and their
aromatic lowercase forms, ``*``, bracket atoms (isotope, chirality, H count,
charge, atom class), branches, ring closures ``1``-``9`` and ``%nn``, bond
symbols ``- = # : / \\`` and the ``.`` component separator. Stereo marks are
accepted and discarded.

Bits do not match RDKit. Identifiers are hashed with 64-bit FNV-1a over the
byte encodings documented in :func:`atom_invariant` and :func:`morgan_identifiers`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tables import read_rows

FP_BITS = 2048

ORGANIC = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_ORGANIC = ("b", "c", "n", "o", "p", "s")
BRACKET_AROMATIC = ("se", "as", "te", "b", "c", "n", "o", "p", "s")
DEFAULT_VALENCE = {
    "B": (3,), "C": (4,), "N": (3, 5), "O": (2,), "P": (3, 5), "S": (2, 4, 6),
    "F": (1,), "Cl": (1,), "Br": (1,), "I": (1,),
}
AROMATIC = 4  # bond order code for aromatic bonds

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF


class SmilesError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


@dataclass
class Atom:
    element: str
    charge: int = 0
    aromatic: bool = False
    hcount: int = 0
    isotope: int | None = None
    bracket: bool = False


@dataclass
class MolGraph:
    atoms: list[Atom] = field(default_factory=list)
    bonds: list[tuple[int, int, int]] = field(default_factory=list)

    def neighbors(self) -> list[list[tuple[int, int]]]:
        """Per atom: list of (bond order code, neighbor index)."""
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for a, b, order in self.bonds:
            adj[a].append((order, b))
            adj[b].append((order, a))
        return adj

    def bond_index(self) -> dict[frozenset, int]:
        return {frozenset((a, b)): k for k, (a, b, _) in enumerate(self.bonds)}


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


# ------------------------------------------------------------------- parsing

class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.mol = MolGraph()
        self.pairs: set[frozenset] = set()

    def error(self, message: str, offset: int | None = None):
        raise SmilesError(message, self.pos if offset is None else offset)

    def peek(self, n: int = 1) -> str:
        return self.text[self.pos:self.pos + n]

    def add_bond(self, a: int, b: int, order: int, offset: int) -> None:
        key = frozenset((a, b))
        if a == b or key in self.pairs:
            self.error("duplicate or self bond", offset)
        self.pairs.add(key)
        self.mol.bonds.append((a, b, order))

    def default_order(self, a: int, b: int) -> int:
        atoms = self.mol.atoms
        return AROMATIC if atoms[a].aromatic and atoms[b].aromatic else 1

    def parse(self) -> MolGraph:
        text = self.text
        if not text:
            self.error("empty SMILES", 0)
        prev: int | None = None
        pending_bond: tuple[int, int] | None = None  # (order, offset)
        branches: list[tuple[int, int]] = []  # (atom index, offset of '(')
        rings: dict[int, tuple[int, int | None, int]] = {}  # digit -> (atom, order, offset)
        expect_atom = True
        while self.pos < len(text):
            ch = text[self.pos]
            start = self.pos
            if ch == "(":
                if prev is None or expect_atom:
                    self.error("branch without preceding atom")
                branches.append((prev, start))
                expect_atom = True
                self.pos += 1
                continue
            if ch == ")":
                if not branches:
                    self.error("unmatched ')'")
                if expect_atom:
                    self.error("empty branch or dangling bond")
                prev = branches.pop()[0]
                self.pos += 1
                continue
            if ch in "-=#:/\\":
                if pending_bond is not None:
                    self.error("consecutive bond symbols")
                if prev is None:
                    self.error("bond without preceding atom")
                order = {"-": 1, "=": 2, "#": 3, ":": AROMATIC, "/": 1, "\\": 1}[ch]
                pending_bond = (order, start)
                expect_atom = True
                self.pos += 1
                continue
            if ch == ".":
                if pending_bond is not None or prev is None or branches:
                    self.error("misplaced '.'")
                prev = None
                expect_atom = True
                self.pos += 1
                continue
            if ch.isdigit() or ch == "%":
                if prev is None:
                    self.error("ring closure without atom")
                if ch == "%":
                    digits = text[self.pos + 1:self.pos + 3]
                    if len(digits) != 2 or not digits.isdigit():
                        self.error("malformed %nn ring closure")
                    number = int(digits)
                    self.pos += 3
                else:
                    number = int(ch)
                    self.pos += 1
                if pending_bond is None and expect_atom:
                    self.error("ring closure without atom", start)
                order = pending_bond[0] if pending_bond else None
                pending_bond = None
                expect_atom = False
                if number in rings:
                    other, other_order, _ = rings.pop(number)
                    if order is not None and other_order is not None and order != other_order:
                        self.error("conflicting ring-closure bond orders", start)
                    final = order or other_order or self.default_order(other, prev)
                    self.add_bond(other, prev, final, start)
                else:
                    rings[number] = (prev, order, start)
                continue
            idx = self.parse_atom()
            if prev is not None:
                order = pending_bond[0] if pending_bond else self.default_order(prev, idx)
                self.add_bond(prev, idx, order, start)
            elif pending_bond is not None:
                self.error("bond without preceding atom", pending_bond[1])
            pending_bond = None
            prev = idx
            expect_atom = False
        if pending_bond is not None:
            self.error("dangling bond", pending_bond[1])
        if branches:
            self.error("unclosed branch", branches[-1][1])
        if rings:
            self.error("unmatched ring closure", min(v[2] for v in rings.values()))
        return self.mol

    def parse_atom(self) -> int:
        text, start = self.text, self.pos
        ch = text[self.pos]
        if ch == "[":
            atom = self.parse_bracket()
        elif ch == "*":
            self.pos += 1
            atom = Atom("*")
        else:
            for sym in ORGANIC:
                if text.startswith(sym, self.pos):
                    self.pos += len(sym)
                    atom = Atom(sym)
                    break
            else:
                if ch in AROMATIC_ORGANIC:
                    self.pos += 1
                    atom = Atom(ch.upper(), aromatic=True)
                else:
                    self.error(f"unknown token {ch!r}", start)
        self.mol.atoms.append(atom)
        return len(self.mol.atoms) - 1

    def parse_bracket(self) -> Atom:
        text, open_pos = self.text, self.pos
        close = text.find("]", open_pos)
        if close < 0:
            self.error("unclosed bracket atom", open_pos)
        body = text[open_pos + 1:close]
        i = 0
        isotope = None
        while i < len(body) and body[i].isdigit():
            i += 1
        if i:
            isotope = int(body[:i])
        aromatic = False
        element = None
        for sym in BRACKET_AROMATIC:
            if body.startswith(sym, i):
                element, aromatic = sym.capitalize(), True
                i += len(sym)
                break
        if element is None:
            if i < len(body) and body[i] == "*":
                element = "*"
                i += 1
            elif i < len(body) and body[i].isupper():
                element = body[i]
                i += 1
                if i < len(body) and body[i].islower():
                    element += body[i]
                    i += 1
            else:
                self.error("bad bracket atom symbol", open_pos + 1 + i)
        while i < len(body) and body[i] == "@":
            i += 1
        for tag in ("TH", "AL", "SP", "TB", "OH"):
            if body.startswith(tag, i):
                i += 2
                while i < len(body) and body[i].isdigit():
                    i += 1
        hcount = 0
        if i < len(body) and body[i] == "H":
            i += 1
            j = i
            while i < len(body) and body[i].isdigit():
                i += 1
            hcount = int(body[j:i]) if i > j else 1
        charge = 0
        if i < len(body) and body[i] in "+-":
            sign = 1 if body[i] == "+" else -1
            sym = body[i]
            i += 1
            j = i
            while i < len(body) and body[i].isdigit():
                i += 1
            if i > j:
                charge = sign * int(body[j:i])
            else:
                mag = 1
                while i < len(body) and body[i] == sym:
                    mag += 1
                    i += 1
                charge = sign * mag
        if i < len(body) and body[i] == ":":
            i += 1
            while i < len(body) and body[i].isdigit():
                i += 1
        if i != len(body):
            self.error(f"unexpected {body[i]!r} in bracket atom", open_pos + 1 + i)
        self.pos = close + 1
        return Atom(element, charge=charge, aromatic=aromatic, hcount=hcount, isotope=isotope, bracket=True)


def _assign_implicit_h(mol: MolGraph) -> None:
    valence_sum = [0.0] * len(mol.atoms)
    aromatic_bonds = [0] * len(mol.atoms)
    for a, b, order in mol.bonds:
        for x in (a, b):
            if order == AROMATIC:
                aromatic_bonds[x] += 1
            else:
                valence_sum[x] += order
    for k, atom in enumerate(mol.atoms):
        if atom.bracket or atom.element not in DEFAULT_VALENCE:
            continue
        # an aromatic system contributes one extra bond order to each member atom
        used = valence_sum[k] + aromatic_bonds[k] + (1 if aromatic_bonds[k] else 0)
        for valence in DEFAULT_VALENCE[atom.element]:
            if valence >= used:
                atom.hcount = int(valence - used)
                break
        else:
            atom.hcount = 0


def parse_smiles(text: str) -> MolGraph:
    """Parse ``text`` into a :class:`MolGraph` with implicit hydrogens filled in."""
    mol = _Parser(text.strip()).parse()
    _assign_implicit_h(mol)
    return mol


# ---------------------------------------------------------------- writing

def write_smiles(mol: MolGraph, rng: np.random.Generator | None = None) -> str:
    """Emit a SMILES string for ``mol``, with a random traversal when ``rng`` is given.

    Every atom is written in bracket form so the round trip is exact regardless
    of valence rules. Used to generate equivalent rewritings for testing.
    """
    n = len(mol.atoms)
    adj = mol.neighbors()
    order_of = {frozenset((a, b)): o for a, b, o in mol.bonds}
    visited = [False] * n
    parent: dict[int, int | None] = {}
    tree_children: dict[int, list[int]] = {i: [] for i in range(n)}
    ring_bonds: list[tuple[int, int]] = []

    def shuffled(items):
        items = list(items)
        if rng is not None:
            rng.shuffle(items)
        return items

    starts = shuffled(range(n))
    roots = []
    for s in starts:
        if visited[s]:
            continue
        roots.append(s)
        stack = [(s, None)]
        while stack:
            node, par = stack.pop()
            if visited[node]:
                continue
            visited[node] = True
            parent[node] = par
            if par is not None:
                tree_children[par].append(node)
            for _, nb in shuffled(adj[node]):
                if not visited[nb]:
                    stack.append((nb, node))
    tree = {frozenset((c, p)) for c, p in parent.items() if p is not None}
    for a, b, _ in mol.bonds:
        if frozenset((a, b)) not in tree:
            ring_bonds.append((a, b))
    ring_at: dict[int, list[tuple[int, int]]] = {i: [] for i in range(n)}
    for k, (a, b) in enumerate(ring_bonds):
        ring_at[a].append((k, b))
        ring_at[b].append((k, a))

    bond_sym = {1: "-", 2: "=", 3: "#", AROMATIC: ":"}
    labels: dict[int, int] = {}
    free = list(range(1, 100))[::-1]

    def atom_text(i: int) -> str:
        atom = mol.atoms[i]
        sym = atom.element.lower() if atom.aromatic else atom.element
        iso = str(atom.isotope) if atom.isotope else ""
        h = "" if atom.hcount == 0 else ("H" if atom.hcount == 1 else f"H{atom.hcount}")
        if atom.charge == 0:
            ch = ""
        else:
            ch = ("+" if atom.charge > 0 else "-") + (str(abs(atom.charge)) if abs(atom.charge) > 1 else "")
        return f"[{iso}{sym}{h}{ch}]"

    def label_text(num: int) -> str:
        return str(num) if num < 10 else f"%{num:02d}"

    out: list[str] = []

    def emit(i: int) -> None:
        out.append(atom_text(i))
        for k, other in ring_at[i]:
            if k in labels:
                num = labels.pop(k)
                out.append(bond_sym[order_of[frozenset((i, other))]] + label_text(num))
                free.append(num)
                free.sort(reverse=True)
            else:
                num = free.pop()
                labels[k] = num
                out.append(label_text(num))
        kids = tree_children[i]
        for j, child in enumerate(kids):
            sym = bond_sym[order_of[frozenset((i, child))]]
            if j < len(kids) - 1:
                out.append("(" + sym)
                emit(child)
                out.append(")")
            else:
                out.append(sym)
                emit(child)

    for r, root in enumerate(roots):
        if r:
            out.append(".")
        emit(root)
    return "".join(out)


# ------------------------------------------------------------ fingerprints

def atom_invariant(mol: MolGraph, adj: list[list[tuple[int, int]]], i: int) -> int:
    """Radius-0 identifier: FNV-1a of ``element|charge|aromatic|degree|hcount``."""
    atom = mol.atoms[i]
    key = f"{atom.element}|{atom.charge}|{int(atom.aromatic)}|{len(adj[i])}|{atom.hcount}"
    return fnv1a64(key.encode("ascii"))


def morgan_identifiers(mol: MolGraph, radius: int = 2) -> list[list[int | None]]:
    """Per iteration, per atom: the environment identifier, or ``None`` when redundant.

    Iteration ``r >= 1`` re-hashes the little-endian uint64 sequence
    ``(r, own id, order_1, nbr_1, order_2, nbr_2, ...)`` with neighbor pairs
    sorted. An environment is redundant when its covered bond set equals one
    already emitted (the smallest identifier wins among equal sets).
    """
    adj = mol.neighbors()
    bond_of = mol.bond_index()
    n = len(mol.atoms)
    ids = [atom_invariant(mol, adj, i) for i in range(n)]
    envs: list[frozenset] = [frozenset()] * n
    result: list[list[int | None]] = [list(ids)]
    seen_envs: set[frozenset] = set()
    for r in range(1, radius + 1):
        new_ids, new_envs = [], []
        for i in range(n):
            pairs = sorted((order, ids[nb]) for order, nb in adj[i])
            payload = [r, ids[i]] + [v for pair in pairs for v in pair]
            new_ids.append(fnv1a64(struct.pack(f"<{len(payload)}Q", *payload)))
            env = set(envs[i])
            for _, nb in adj[i]:
                env.add(bond_of[frozenset((i, nb))])
                env |= envs[nb]
            new_envs.append(frozenset(env))
        emitted: list[int | None] = [None] * n
        candidates = sorted(
            (i for i in range(n) if new_envs[i] and new_envs[i] != envs[i]),
            key=lambda i: (new_ids[i],),
        )
        for i in candidates:
            if new_envs[i] in seen_envs:
                continue
            seen_envs.add(new_envs[i])
            emitted[i] = new_ids[i]
        result.append(emitted)
        ids, envs = new_ids, new_envs
    return result


def morgan_fingerprint(mol: MolGraph, radius: int = 2, nbits: int = FP_BITS) -> np.ndarray:
    """Fold every non-redundant identifier from iterations ``0..radius`` into ``nbits`` bits."""
    bits = np.zeros(nbits, dtype=np.uint8)
    for layer in morgan_identifiers(mol, radius):
        for ident in layer:
            if ident is not None:
                bits[ident % nbits] = 1
    return bits


def tanimoto(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def smiles_fingerprint(text: str, radius: int = 2, nbits: int = FP_BITS) -> np.ndarray:
    return morgan_fingerprint(parse_smiles(text), radius, nbits)


def read_smiles_file(path: str | Path) -> list[tuple[str, str]]:
    """Read a two-column delimited ``drug_id, smiles`` file with a header row."""
    rows = read_rows(path)
    out = []
    for row in rows[1:]:
        if len(row) < 2:
            raise ValueError(f"{path}: expected two columns, got {row!r}")
        out.append((row[0].strip(), row[1].strip()))
    return out


def fingerprint_matrix(entries: Sequence[tuple[str, str]], radius: int = 2,
                       nbits: int = FP_BITS) -> tuple[list[str], np.ndarray]:
    ids = [drug for drug, _ in entries]
    mat = np.vstack([smiles_fingerprint(s, radius, nbits) for _, s in entries]) if entries \
        else np.zeros((0, nbits), dtype=np.uint8)
    return ids, mat


def write_fingerprint_matrix(path: str | Path, ids: Sequence[str], bits: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(["drug_id"] + [f"bit_{k}" for k in range(bits.shape[1])]) + "\n")
        for drug, row in zip(ids, bits):
            fh.write(drug + "," + ",".join(str(int(b)) for b in row) + "\n")
