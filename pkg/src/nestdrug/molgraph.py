"""SMILES parsing, canonical molecular identity, and graph featurization.

Supported subset: single-fragment molecules over B C N O P S F Cl Br I
(aromatic lowercase forms included), bracket atoms with charge and explicit
hydrogen counts, branches, ring closures 1-9 and %nn, bond symbols - = # :,
and double-bond cis/trans marks via / and \\. Isotopes, wildcard atoms,
dot-disconnected fragments, and tetrahedral chirality are rejected with
``UnsupportedFeatureError``.

Hydrogens are implicit only and never instantiated as graph nodes. Lowercase
aromatic notation is taken as authoritative; the parser validates that
aromatic atoms and bonds sit in rings but performs no aromaticity perception,
so Kekule and aromatic spellings of the same ring are distinct molecules here.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np

from .errors import (
    InvariantViolationError,
    SmilesSyntaxError,
    UnsupportedFeatureError,
    ValenceError,
)

ORGANIC_SUBSET = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
BOND_ORDERS = ("single", "double", "triple", "aromatic")
STEREO_LABELS = ("none", "E", "Z")
HYBRIDIZATIONS = ("sp", "sp2", "sp3", "sp3d", "sp3d2")

# Lowest-first candidate valences used when filling implicit hydrogens.
DEFAULT_VALENCES = {
    "B": (3,),
    "C": (4,),
    "N": (3, 5),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}

ATOMIC_MASS = {
    "B": 10.811, "C": 12.011, "N": 14.007, "O": 15.999, "F": 18.998,
    "P": 30.974, "S": 32.06, "Cl": 35.45, "Br": 79.904, "I": 126.904,
}
PAULING_EN = {
    "B": 2.04, "C": 2.55, "N": 3.04, "O": 3.44, "F": 3.98,
    "P": 2.19, "S": 2.58, "Cl": 3.16, "Br": 2.96, "I": 2.66,
}
PERIOD = {
    "B": 2, "C": 2, "N": 2, "O": 2, "F": 2,
    "P": 3, "S": 3, "Cl": 3, "Br": 4, "I": 5,
}
MAIN_GROUP = {
    "B": 13, "C": 14, "N": 15, "O": 16, "F": 17,
    "P": 15, "S": 16, "Cl": 17, "Br": 17, "I": 17,
}

ATOM_FEATURE_DIM = 70
BOND_FEATURE_DIM = 9

_BOND_ORDER_CODE = {"single": 1, "double": 2, "triple": 3, "aromatic": 4}
_SIGMA_ORDER = {"single": 1, "double": 2, "triple": 3}

CANONICAL_TAG = "CF1:"


@dataclass(frozen=True)
class Atom:
    element: str
    charge: int = 0
    aromatic: bool = False
    h_count: int = 0
    degree: int = 0
    in_ring: bool = False
    hybridization: str = "sp3"
    ring_sizes: tuple[int, ...] = ()


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: str
    conjugated: bool = False
    in_ring: bool = False
    stereo: str = "none"
    # Reference substituents the cis/trans parity is stated against; only
    # meaningful when stereo != "none".
    stereo_ref_a: int = -1
    stereo_ref_b: int = -1
    stereo_cis: bool = False

    def other(self, idx: int) -> int:
        return self.b if idx == self.a else self.a


@dataclass(frozen=True)
class MolGraph:
    """Immutable molecular graph with precomputed feature matrices."""

    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    atom_features: np.ndarray
    bond_features: np.ndarray
    neighbors: tuple[tuple[int, ...], ...]  # neighbors[i] -> incident bond indices

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)

    @property
    def num_bonds(self) -> int:
        return len(self.bonds)


@dataclass(frozen=True)
class CanonicalForm:
    """Versioned canonical serialization; equal molecules compare equal."""

    text: str

    def __post_init__(self):
        if not self.text.startswith(CANONICAL_TAG):
            raise InvariantViolationError("canonical form missing version tag")

    @property
    def smiles(self) -> str:
        return self.text[len(CANONICAL_TAG):]


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

class _ParsedAtom:
    __slots__ = ("element", "aromatic", "charge", "explicit_h", "pos")

    def __init__(self, element, aromatic, charge, explicit_h, pos):
        self.element = element
        self.aromatic = aromatic
        self.charge = charge
        self.explicit_h = explicit_h  # None -> fill from valence model
        self.pos = pos


class _ParsedBond:
    __slots__ = ("a", "b", "symbol", "pos", "order", "in_ring")

    def __init__(self, a, b, symbol, pos):
        self.a = a
        self.b = b
        self.symbol = symbol  # one of - = # : or None (default); marks stored aside
        self.pos = pos
        self.order = None
        self.in_ring = False


_CHARGE_CHARS = {"+": 1, "-": -1}
_MIRROR = {"/": "\\", "\\": "/"}


def _parse_bracket(s: str, i: int) -> tuple[_ParsedAtom, int]:
    start = i
    j = s.find("]", i)
    if j < 0:
        raise SmilesSyntaxError(start, "unterminated bracket atom")
    body = s[i + 1:j]
    if not body:
        raise SmilesSyntaxError(start, "empty bracket atom")
    k = 0
    if body[k].isdigit():
        raise UnsupportedFeatureError(start + 1, "isotope specification")
    if body[k] == "*":
        raise UnsupportedFeatureError(start + 1, "wildcard atom")
    aromatic = False
    if body[k:k + 2] in ("Cl", "Br"):
        element = body[k:k + 2]
        k += 2
    elif body[k] in "BCNOPSFI":
        element = body[k]
        k += 1
    elif body[k] in "bcnops":
        element = body[k].upper()
        aromatic = True
        k += 1
    else:
        raise UnsupportedFeatureError(start + 1 + k, f"atom symbol {body[k:]!r}")
    if k < len(body) and body[k] == "@":
        raise UnsupportedFeatureError(start + 1 + k, "tetrahedral chirality")
    h_count = 0
    if k < len(body) and body[k] == "H":
        k += 1
        h_count = 1
        digits = ""
        while k < len(body) and body[k].isdigit():
            digits += body[k]
            k += 1
        if digits:
            h_count = int(digits)
    charge = 0
    if k < len(body) and body[k] in _CHARGE_CHARS:
        sign = _CHARGE_CHARS[body[k]]
        run = 1
        k += 1
        digits = ""
        while k < len(body) and body[k].isdigit():
            digits += body[k]
            k += 1
        if digits:
            charge = sign * int(digits)
        else:
            while k < len(body) and body[k] == ("+" if sign > 0 else "-"):
                run += 1
                k += 1
            charge = sign * run
    if k < len(body):
        if body[k] == ":":
            raise UnsupportedFeatureError(start + 1 + k, "atom map")
        raise SmilesSyntaxError(start + 1 + k, f"unexpected {body[k]!r} in bracket atom")
    return _ParsedAtom(element, aromatic, charge, h_count, start), j + 1


def _tokenize(s: str):
    """Single pass over the string building parsed atoms/bonds/stereo marks."""
    atoms: list[_ParsedAtom] = []
    bonds: list[_ParsedBond] = []
    bond_index: dict[tuple[int, int], int] = {}
    ring_open: dict[int, tuple[int, str | None, int]] = {}
    stack: list[int] = []
    prev: int | None = None
    pending: str | None = None
    pending_pos = -1
    marks: list[tuple[int, int, str, int]] = []  # (from_atom, to_atom, / or \, pos)

    def add_bond(a: int, b: int, symbol: str | None, pos: int):
        if a == b:
            raise SmilesSyntaxError(pos, "bond from atom to itself")
        key = (min(a, b), max(a, b))
        if key in bond_index:
            raise SmilesSyntaxError(pos, "duplicate bond between atoms")
        sym = symbol
        if symbol in ("/", "\\"):
            marks.append((a, b, symbol, pos))
            sym = "-"
        bonds.append(_ParsedBond(a, b, sym, pos))
        bond_index[key] = len(bonds) - 1

    def add_atom(pa: _ParsedAtom):
        nonlocal prev, pending
        atoms.append(pa)
        idx = len(atoms) - 1
        if prev is not None:
            add_bond(prev, idx, pending, pending_pos if pending else pa.pos)
        elif pending is not None:
            raise SmilesSyntaxError(pending_pos, "bond symbol before first atom")
        prev = idx
        pending = None

    def close_ring(num: int, pos: int):
        nonlocal pending
        if prev is None:
            raise SmilesSyntaxError(pos, "ring closure before any atom")
        if num in ring_open:
            open_atom, open_sym, _ = ring_open.pop(num)
            if open_atom == prev:
                raise SmilesSyntaxError(pos, "ring closure to the same atom")
            sym = pending
            if open_sym is not None:
                # the opening symbol reads from open_atom toward the partner
                translated = _MIRROR.get(open_sym, open_sym)
                if sym is not None and sym != translated:
                    raise SmilesSyntaxError(pos, "conflicting ring-closure bond symbols")
                sym = translated
            add_bond(prev, open_atom, sym, pos)
        else:
            ring_open[num] = (prev, pending, pos)
        pending = None

    i = 0
    n = len(s)
    while i < n:
        c = s[i]
        if c == "[":
            pa, i = _parse_bracket(s, i)
            add_atom(pa)
            continue
        if s[i:i + 2] in ("Cl", "Br"):
            add_atom(_ParsedAtom(s[i:i + 2], False, 0, None, i))
            i += 2
            continue
        if c in "BCNOPSFI":
            add_atom(_ParsedAtom(c, False, 0, None, i))
            i += 1
            continue
        if c in "bcnops":
            add_atom(_ParsedAtom(c.upper(), True, 0, None, i))
            i += 1
            continue
        if c in "-=#:/\\":
            if pending is not None:
                raise SmilesSyntaxError(i, "two bond symbols in a row")
            if prev is None:
                raise SmilesSyntaxError(i, "bond symbol before first atom")
            pending = c
            pending_pos = i
            i += 1
            continue
        if c == "(":
            if prev is None:
                raise SmilesSyntaxError(i, "branch before any atom")
            if pending is not None:
                raise SmilesSyntaxError(i, "bond symbol before branch open")
            stack.append(prev)
            i += 1
            continue
        if c == ")":
            if not stack:
                raise SmilesSyntaxError(i, "unmatched branch close")
            if pending is not None:
                raise SmilesSyntaxError(i, "dangling bond before branch close")
            prev = stack.pop()
            i += 1
            continue
        if c.isdigit():
            close_ring(int(c), i)
            i += 1
            continue
        if c == "%":
            if i + 2 >= n or not (s[i + 1].isdigit() and s[i + 2].isdigit()):
                raise SmilesSyntaxError(i, "% needs two digits")
            close_ring(int(s[i + 1:i + 3]), i)
            i += 3
            continue
        if c == ".":
            raise UnsupportedFeatureError(i, "dot-disconnected fragments")
        if c == "*":
            raise UnsupportedFeatureError(i, "wildcard atom")
        if c == ">":
            raise UnsupportedFeatureError(i, "reaction arrow")
        raise SmilesSyntaxError(i, f"unexpected character {c!r}")

    if pending is not None:
        raise SmilesSyntaxError(pending_pos, "dangling bond symbol")
    if stack:
        raise SmilesSyntaxError(n, "unclosed branch")
    if ring_open:
        num, (_, _, pos) = next(iter(sorted(ring_open.items())))
        raise SmilesSyntaxError(pos, f"unclosed ring bond {num}")
    if not atoms:
        raise SmilesSyntaxError(0, "no atoms")
    return atoms, bonds, marks


def _find_ring_bonds(n_atoms: int, bonds: list[_ParsedBond]) -> list[bool]:
    """Bond is in a ring iff it is not a bridge (iterative lowlink DFS)."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n_atoms)]
    for bi, b in enumerate(bonds):
        adj[b.a].append((b.b, bi))
        adj[b.b].append((b.a, bi))
    disc = [-1] * n_atoms
    low = [0] * n_atoms
    is_bridge = [False] * len(bonds)
    timer = 0
    for root in range(n_atoms):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            v, pedge, it = stack[-1]
            advanced = False
            for (u, bi) in it:
                if bi == pedge:
                    continue
                if disc[u] == -1:
                    disc[u] = low[u] = timer
                    timer += 1
                    stack.append((u, bi, iter(adj[u])))
                    advanced = True
                    break
                low[v] = min(low[v], disc[u])
            if advanced:
                continue
            stack.pop()
            if stack:
                parent = stack[-1][0]
                low[parent] = min(low[parent], low[v])
                if low[v] > disc[parent]:
                    is_bridge[pedge] = True
    return [not br for br in is_bridge]


def _smallest_ring_sizes(n_atoms: int, bonds: list[_ParsedBond]) -> list[set[int]]:
    """Per atom, sizes of the smallest ring through each incident ring bond."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n_atoms)]
    for bi, b in enumerate(bonds):
        adj[b.a].append((b.b, bi))
        adj[b.b].append((b.a, bi))
    sizes: list[set[int]] = [set() for _ in range(n_atoms)]
    for bi, b in enumerate(bonds):
        if not b.in_ring:
            continue
        dist = {b.a: 0}
        frontier = [b.a]
        found = -1
        while frontier and found < 0:
            nxt = []
            for v in frontier:
                for (u, ei) in adj[v]:
                    if ei == bi or u in dist:
                        continue
                    dist[u] = dist[v] + 1
                    if u == b.b:
                        found = dist[u]
                        break
                    nxt.append(u)
                if found >= 0:
                    break
            frontier = nxt
        if found >= 0:
            sizes[b.a].add(found + 1)
            sizes[b.b].add(found + 1)
    return sizes


def _implicit_h(element, aromatic, sigma_sum, n_arom, n_multiple, degree, pos):
    """Fill hydrogens from the lowest default valence that fits.

    Aromatic atoms count each aromatic bond as one plus, for atoms that must
    contribute a ring double bond in any Kekule assignment (carbon/boron
    always, two-connected nitrogen/phosphorus), one extra unit.
    """
    pi = 0
    if aromatic:
        if element in ("C", "B") and n_multiple == 0:
            pi = 1
        elif element in ("N", "P") and degree == 2 and n_multiple == 0:
            pi = 1
    total = sigma_sum + n_arom + pi
    for v in DEFAULT_VALENCES[element]:
        if v >= total:
            return v - total
    raise ValenceError(
        f"atom at position {pos}: bond order sum {total} exceeds valences "
        f"{DEFAULT_VALENCES[element]} for {element}"
    )


# ---------------------------------------------------------------------------
# rank refinement
# ---------------------------------------------------------------------------

def _refine(seed_keys, nwc):
    """Iterate (rank, sorted neighbor signature) until the partition is stable."""
    order = sorted(set(seed_keys))
    index = {k: r for r, k in enumerate(order)}
    ranks = [index[k] for k in seed_keys]
    while True:
        sigs = [
            (ranks[i], tuple(sorted((code, ranks[j]) for (j, code) in nwc[i])))
            for i in range(len(ranks))
        ]
        uniq = sorted(set(sigs))
        index = {s: r for r, s in enumerate(uniq)}
        new_ranks = [index[s] for s in sigs]
        if new_ranks == ranks:
            return ranks
        ranks = new_ranks


def _invariant_keys(atoms: tuple[Atom, ...]):
    return [
        (a.element, a.charge, a.degree, a.h_count, a.aromatic) for a in atoms
    ]


def _neighbor_code_lists(atoms, bonds):
    nwc: list[list[tuple[int, int]]] = [[] for _ in range(len(atoms))]
    for b in bonds:
        code = _BOND_ORDER_CODE[b.order]
        nwc[b.a].append((b.b, code))
        nwc[b.b].append((b.a, code))
    return nwc


def refinement_ranks(m: MolGraph) -> list[int]:
    """Symmetry-respecting atom ranks (ties mark equivalent atoms)."""
    return _refine(_invariant_keys(m.atoms), _neighbor_code_lists(m.atoms, m.bonds))


def _canonical_ranks(m: MolGraph) -> list[int]:
    """Total atom order: refinement plus deterministic tie bumping."""
    nwc = _neighbor_code_lists(m.atoms, m.bonds)
    ranks = _refine(_invariant_keys(m.atoms), nwc)
    n = len(ranks)
    while True:
        by_rank: dict[int, list[int]] = {}
        for i, r in enumerate(ranks):
            by_rank.setdefault(r, []).append(i)
        tied = sorted(r for r, members in by_rank.items() if len(members) > 1)
        if not tied:
            return ranks
        chosen = min(by_rank[tied[0]])
        ranks = _refine([(ranks[i], 0 if i == chosen else 1) for i in range(n)], nwc)


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------

def parse_smiles(s: str) -> MolGraph:
    """Parse a SMILES string into an immutable, featurized molecular graph."""
    if not isinstance(s, str) or not s:
        raise SmilesSyntaxError(0, "empty input")
    if not s.isascii():
        raise SmilesSyntaxError(0, "non-ASCII input")

    atoms, bonds, marks = _tokenize(s)
    n = len(atoms)

    ring_flags = _find_ring_bonds(n, bonds)
    for bi, b in enumerate(bonds):
        b.in_ring = ring_flags[bi]

    for b in bonds:
        both_aromatic = atoms[b.a].aromatic and atoms[b.b].aromatic
        if b.symbol is None:
            b.order = "aromatic" if (both_aromatic and b.in_ring) else "single"
        elif b.symbol == "-":
            b.order = "single"
        elif b.symbol == "=":
            b.order = "double"
        elif b.symbol == "#":
            b.order = "triple"
        else:  # ":"
            if not (both_aromatic and b.in_ring):
                raise SmilesSyntaxError(b.pos, "aromatic bond outside an aromatic ring")
            b.order = "aromatic"

    arom_bond_count = [0] * n
    for b in bonds:
        if b.order == "aromatic":
            arom_bond_count[b.a] += 1
            arom_bond_count[b.b] += 1
    for i, a in enumerate(atoms):
        if a.aromatic and arom_bond_count[i] < 2:
            raise SmilesSyntaxError(a.pos, "aromatic atom outside an aromatic ring")
        if not a.aromatic and arom_bond_count[i] > 0:
            raise SmilesSyntaxError(a.pos, "aromatic bond to a non-aromatic atom")

    incident: list[list[int]] = [[] for _ in range(n)]
    for bi, b in enumerate(bonds):
        incident[b.a].append(bi)
        incident[b.b].append(bi)

    h_counts = []
    for i, a in enumerate(atoms):
        if a.explicit_h is not None:
            if a.element not in ORGANIC_SUBSET:
                raise UnsupportedFeatureError(a.pos, f"element {a.element}")
            h_counts.append(a.explicit_h)
            continue
        if a.element not in ORGANIC_SUBSET:
            raise UnsupportedFeatureError(a.pos, f"element {a.element}")
        sigma = sum(_SIGMA_ORDER[bonds[bi].order] for bi in incident[i]
                    if bonds[bi].order != "aromatic")
        n_multiple = sum(1 for bi in incident[i]
                         if bonds[bi].order in ("double", "triple"))
        h_counts.append(
            _implicit_h(a.element, a.aromatic, sigma, arom_bond_count[i],
                        n_multiple, len(incident[i]), a.pos)
        )

    hybrids = []
    for i, a in enumerate(atoms):
        n_double = sum(1 for bi in incident[i] if bonds[bi].order == "double")
        n_triple = sum(1 for bi in incident[i] if bonds[bi].order == "triple")
        if a.aromatic:
            hybrids.append("sp2")
        elif n_triple > 0 or n_double >= 2:
            hybrids.append("sp")
        elif n_double == 1:
            hybrids.append("sp2")
        else:
            total = len(incident[i]) + h_counts[i]
            hybrids.append("sp3d2" if total >= 6 else "sp3d" if total == 5 else "sp3")

    ring_sizes = _smallest_ring_sizes(n, bonds)

    # double-bond stereo from directional marks
    mark_by_bond: dict[tuple[int, int], tuple[int, int, str]] = {}
    for (a, b2, sym, _pos) in marks:
        mark_by_bond[(min(a, b2), max(a, b2))] = (a, b2, sym)

    def mark_sign(u: int, nb: int) -> int | None:
        """+1 if nb is drawn above u, -1 below, None when unmarked."""
        rec = mark_by_bond.get((min(u, nb), max(u, nb)))
        if rec is None:
            return None
        frm, to, sym = rec
        up = 1 if sym == "/" else -1
        return up if (frm, to) == (u, nb) else -up

    # refinement-only ranks for picking stereo reference substituents
    proto_atoms = tuple(
        Atom(element=a.element, charge=a.charge, aromatic=a.aromatic,
             h_count=h_counts[i], degree=len(incident[i]))
        for i, a in enumerate(atoms)
    )
    proto_bonds = tuple(Bond(a=b.a, b=b.b, order=b.order) for b in bonds)
    sub_ranks = _refine(_invariant_keys(proto_atoms),
                        _neighbor_code_lists(proto_atoms, proto_bonds))

    stereo_info: dict[int, tuple[str, int, int, bool]] = {}
    for bi, b in enumerate(bonds):
        if b.order != "double":
            continue
        marked = []
        ok = True
        for end in (b.a, b.b):
            cands = []
            for ei in incident[end]:
                eb = bonds[ei]
                if ei == bi or eb.order != "single":
                    continue
                nb = eb.b if eb.a == end else eb.a
                sgn = mark_sign(end, nb)
                if sgn is not None:
                    cands.append((nb, sgn))
            if not cands:
                ok = False
                break
            if len(cands) == 2 and cands[0][1] == cands[1][1]:
                raise SmilesSyntaxError(
                    b.pos, "conflicting cis/trans marks on one double-bond end")
            marked.append(cands[0])
        if not ok:
            continue
        (ma, sa), (mb, sb) = marked
        cis = sa == sb
        refs = []
        for (end, other, mk) in ((b.a, b.b, ma), (b.b, b.a, mb)):
            cands = [(bonds[ei].b if bonds[ei].a == end else bonds[ei].a)
                     for ei in incident[end]
                     if ei != bi and bonds[ei].order == "single"]
            best = min(cands, key=lambda c: (sub_ranks[c], 0 if c == mk else 1))
            if sum(1 for c in cands if sub_ranks[c] == sub_ranks[best]) > 1:
                refs = None  # symmetric substituents: no stereoisomerism
                break
            refs.append((best, best == mk))
        if refs is None:
            continue
        (ref_a, same_a), (ref_b, same_b) = refs
        norm_cis = cis ^ (not same_a) ^ (not same_b)
        stereo_info[bi] = ("Z" if norm_cis else "E", ref_a, ref_b, norm_cis)

    # conjugation: alternating multiple/single pattern; aromatic always
    multiple = [b.order in ("double", "triple", "aromatic") for b in bonds]

    def other_multiple(atom_idx: int, skip_bi: int) -> bool:
        return any(multiple[ei] for ei in incident[atom_idx] if ei != skip_bi)

    conj = []
    for bi, b in enumerate(bonds):
        if b.order == "aromatic":
            conj.append(True)
        elif b.order == "single":
            conj.append(other_multiple(b.a, bi) and other_multiple(b.b, bi))
        else:
            found = False
            for end in (b.a, b.b):
                for ei in incident[end]:
                    if ei == bi or bonds[ei].order != "single":
                        continue
                    w = bonds[ei].b if bonds[ei].a == end else bonds[ei].a
                    if other_multiple(w, ei):
                        found = True
                        break
                if found:
                    break
            conj.append(found)

    final_atoms = tuple(
        Atom(
            element=a.element,
            charge=a.charge,
            aromatic=a.aromatic,
            h_count=h_counts[i],
            degree=len(incident[i]),
            in_ring=any(bonds[bi].in_ring for bi in incident[i]),
            hybridization=hybrids[i],
            ring_sizes=tuple(sorted(ring_sizes[i])),
        )
        for i, a in enumerate(atoms)
    )
    final_bonds = tuple(
        Bond(
            a=b.a, b=b.b, order=b.order, conjugated=conj[bi], in_ring=b.in_ring,
            stereo=stereo_info[bi][0] if bi in stereo_info else "none",
            stereo_ref_a=stereo_info[bi][1] if bi in stereo_info else -1,
            stereo_ref_b=stereo_info[bi][2] if bi in stereo_info else -1,
            stereo_cis=stereo_info[bi][3] if bi in stereo_info else False,
        )
        for bi, b in enumerate(bonds)
    )
    atom_feats, bond_feats = _featurize_arrays(final_atoms, final_bonds)
    return MolGraph(
        atoms=final_atoms,
        bonds=final_bonds,
        atom_features=atom_feats,
        bond_features=bond_feats,
        neighbors=tuple(tuple(incident[i]) for i in range(n)),
    )


# ---------------------------------------------------------------------------
# featurization (70-dim atoms, 9-dim bonds)
# ---------------------------------------------------------------------------

_ELEMENT_SLOTS = ("C", "N", "O", "S", "F", "Cl", "Br", "I", "P")  # slot 9 = other
_CHARGE_SLOTS = (-2, -1, 0, 1, 2)
_PERIOD_SLOTS = (1, 2, 3, 4, 5)
_GROUP_SLOTS = (1, 2, 13, 14, 15, 16, 17, 18)


def _featurize_arrays(atoms: tuple[Atom, ...], bonds: tuple[Bond, ...]):
    av = np.zeros((len(atoms), ATOM_FEATURE_DIM), dtype=np.float64)
    for i, a in enumerate(atoms):
        row = av[i]
        if a.element in _ELEMENT_SLOTS:
            row[_ELEMENT_SLOTS.index(a.element)] = 1.0
        else:
            row[9] = 1.0
        row[10 + min(a.degree, 5)] = 1.0
        row[16 + _CHARGE_SLOTS.index(max(-2, min(2, a.charge)))] = 1.0
        row[21 + HYBRIDIZATIONS.index(a.hybridization)] = 1.0
        row[26] = 1.0 if a.aromatic else 0.0
        row[27] = 1.0 if a.in_ring else 0.0
        row[28 + min(a.h_count, 4)] = 1.0
        # extended block (37 dims) at offset 33: chirality flag, scaled mass,
        # scaled electronegativity, period one-hot (5), main-group one-hot (8),
        # ring-size 3..8 flags (6), radical one-hot (3), zero padding (12)
        base = 33
        row[base + 0] = 0.0  # tetrahedral centers rejected at parse time
        row[base + 1] = ATOMIC_MASS.get(a.element, 0.0) / 100.0
        row[base + 2] = PAULING_EN.get(a.element, 0.0) / 4.0
        row[base + 3 + _PERIOD_SLOTS.index(PERIOD.get(a.element, 1))] = 1.0
        row[base + 8 + _GROUP_SLOTS.index(MAIN_GROUP.get(a.element, 1))] = 1.0
        for k, size in enumerate(range(3, 9)):
            if size in a.ring_sizes:
                row[base + 16 + k] = 1.0
        row[base + 22] = 1.0  # zero radical electrons
    bv = np.zeros((len(bonds), BOND_FEATURE_DIM), dtype=np.float64)
    for i, b in enumerate(bonds):
        bv[i, BOND_ORDERS.index(b.order)] = 1.0
        bv[i, 4] = 1.0 if b.conjugated else 0.0
        bv[i, 5] = 1.0 if b.in_ring else 0.0
        bv[i, 6 + STEREO_LABELS.index(b.stereo)] = 1.0
    return av, bv


def featurize(m: MolGraph) -> tuple[np.ndarray, np.ndarray]:
    """Recompute the fixed feature layout; pure function of the graph."""
    return _featurize_arrays(m.atoms, m.bonds)


# ---------------------------------------------------------------------------
# canonical serialization
# ---------------------------------------------------------------------------

def _atom_token(a: Atom, sigma_sum, n_arom, n_multiple) -> str:
    sym = a.element.lower() if a.aromatic else a.element
    bare_ok = a.charge == 0
    if bare_ok:
        try:
            derived = _implicit_h(a.element, a.aromatic, sigma_sum, n_arom,
                                  n_multiple, a.degree, -1)
        except ValenceError:
            derived = -1
        bare_ok = derived == a.h_count
    if bare_ok:
        return sym
    h = "" if a.h_count == 0 else ("H" if a.h_count == 1 else f"H{a.h_count}")
    if a.charge == 0:
        q = ""
    elif a.charge == 1:
        q = "+"
    elif a.charge == -1:
        q = "-"
    else:
        q = f"{'+' if a.charge > 0 else '-'}{abs(a.charge)}"
    return f"[{sym}{h}{q}]"


def _serialize(g: MolGraph, ranks: list[int], strip_stereo: bool) -> str:
    n = g.num_atoms
    root = min(range(n), key=lambda i: (ranks[i], i))

    visited = [False] * n
    used_edge = [False] * g.num_bonds
    children: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    closures_at: list[list[tuple[int, int, bool]]] = [[] for _ in range(n)]
    counter = [0]

    def walk(v: int, pbond: int):
        visited[v] = True
        for (u, bi) in sorted(
            ((g.bonds[bi].other(v), bi) for bi in g.neighbors[v]),
            key=lambda t: (ranks[t[0]], t[0]),
        ):
            if bi == pbond or used_edge[bi]:
                continue
            used_edge[bi] = True
            if visited[u]:
                counter[0] += 1
                num = counter[0]
                closures_at[u].append((num, bi, False))  # opening side
                closures_at[v].append((num, bi, True))   # closing side
            else:
                children[v].append((bi, u))
                walk(u, bi)

    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, 8 * n + 100))
    try:
        walk(root, -1)
    finally:
        sys.setrecursionlimit(old_limit)

    # orientation variables for stereo marks: orient[(x, y)] = +1 if y above x
    orient: dict[tuple[int, int], int] = {}

    def set_orient(x: int, y: int, val: int):
        cur = orient.get((x, y))
        if cur is not None and cur != val:
            raise InvariantViolationError("inconsistent stereo orientation")
        orient[(x, y)] = val
        orient[(y, x)] = -val

    if not strip_stereo:
        stereo_bonds = sorted(
            (bi for bi, b in enumerate(g.bonds) if b.stereo != "none"),
            key=lambda bi: (min(ranks[g.bonds[bi].a], ranks[g.bonds[bi].b]), bi),
        )
        for bi in stereo_bonds:
            b = g.bonds[bi]
            want_equal = b.stereo_cis  # same side <=> same sign
            su = orient.get((b.a, b.stereo_ref_a))
            sv = orient.get((b.b, b.stereo_ref_b))
            if su is None and sv is None:
                set_orient(b.a, b.stereo_ref_a, 1)
                set_orient(b.b, b.stereo_ref_b, 1 if want_equal else -1)
            elif su is None:
                set_orient(b.a, b.stereo_ref_a, sv if want_equal else -sv)
            elif sv is None:
                set_orient(b.b, b.stereo_ref_b, su if want_equal else -su)
            elif (su == sv) != want_equal:
                raise InvariantViolationError("stereo constraint conflict")

    def bond_symbol(frm: int, to: int, b: Bond) -> str:
        if b.order == "single":
            o = orient.get((frm, to))
            if o is not None:
                return "/" if o > 0 else "\\"
            if g.atoms[frm].aromatic and g.atoms[to].aromatic:
                return "-"
            return ""
        if b.order == "double":
            return "="
        if b.order == "triple":
            return "#"
        return ""  # aromatic is the default between aromatic atoms

    sigma_sums, arom_counts, multi_counts = [], [], []
    for i in range(n):
        sigma_sums.append(sum(_SIGMA_ORDER[g.bonds[bi].order]
                              for bi in g.neighbors[i]
                              if g.bonds[bi].order != "aromatic"))
        arom_counts.append(sum(1 for bi in g.neighbors[i]
                               if g.bonds[bi].order == "aromatic"))
        multi_counts.append(sum(1 for bi in g.neighbors[i]
                                if g.bonds[bi].order in ("double", "triple")))

    out: list[str] = []

    def emit(v: int):
        out.append(_atom_token(g.atoms[v], sigma_sums[v], arom_counts[v],
                               multi_counts[v]))
        for (num, bi, closing) in sorted(closures_at[v]):
            if closing:
                out.append(bond_symbol(v, g.bonds[bi].other(v), g.bonds[bi]))
            out.append(str(num) if num < 10 else f"%{num:02d}")
        kids = children[v]
        for idx, (bi, u) in enumerate(kids):
            last = idx == len(kids) - 1
            if not last:
                out.append("(")
            out.append(bond_symbol(v, u, g.bonds[bi]))
            emit(u)
            if not last:
                out.append(")")

    sys.setrecursionlimit(max(old_limit, 8 * n + 100))
    try:
        emit(root)
    finally:
        sys.setrecursionlimit(old_limit)
    return "".join(out)


def canonical_form(m: MolGraph, strip_stereo: bool = False) -> CanonicalForm:
    """Deterministic canonical serialization, invariant to input spelling.

    The text after the "CF1:" format tag is a parseable SMILES string in the
    supported subset. ``strip_stereo`` drops double-bond stereo marks before
    serializing (the audit normalization toggle).
    """
    ranks = _canonical_ranks(m)
    return CanonicalForm(CANONICAL_TAG + _serialize(m, ranks, strip_stereo))


def molecule_equal(a: MolGraph, b: MolGraph) -> bool:
    """True iff both graphs canonicalize to the same text."""
    return canonical_form(a) == canonical_form(b)
