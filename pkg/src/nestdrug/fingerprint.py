"""Circular (Morgan-style) fingerprints and Tanimoto similarity search.

Environment identifiers are built by iterated hashing of sorted neighbor
identifiers and bond-order codes, seeded from a canonical atom invariant
tuple. The mixing function is a fixed 64-bit SplitMix64 chain, so bit values
are platform independent but intentionally NOT compatible with any external
toolkit's fingerprints.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import EmptyPoolError, ParameterError, ShapeError
from .molgraph import MolGraph

VALID_NBITS = (512, 1024, 2048, 4096)

_MASK = (1 << 64) - 1


def _mix64(z: int) -> int:
    """SplitMix64 finalizer; fixed and documented for reproducibility."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _hash_ints(values) -> int:
    h = 0x243F6A8885A308D3
    for v in values:
        h = _mix64(h ^ (v & _MASK))
    return h


@dataclass(frozen=True)
class Fingerprint:
    bits: int  # bitset packed into a Python int
    nbits: int
    radius: int

    def __post_init__(self):
        if self.nbits not in VALID_NBITS:
            raise ParameterError(f"nbits must be one of {VALID_NBITS}")
        if not 0 <= self.radius <= 4:
            raise ParameterError("radius must be in [0, 4]")

    @property
    def set_count(self) -> int:
        return self.bits.bit_count()

    def to_hex(self) -> str:
        return format(self.bits, f"0{self.nbits // 4}x")

    @classmethod
    def from_hex(cls, text: str, nbits: int, radius: int) -> "Fingerprint":
        if len(text) != nbits // 4:
            raise ShapeError("hex width does not match nbits")
        return cls(bits=int(text, 16), nbits=nbits, radius=radius)


_ORDER_CODE = {"single": 1, "double": 2, "triple": 3, "aromatic": 4}
_ELEMENT_CODE = {
    "B": 5, "C": 6, "N": 7, "O": 8, "F": 9, "P": 15, "S": 16,
    "Cl": 17, "Br": 35, "I": 53,
}


def atom_environment_ids(m: MolGraph, radius: int) -> list[list[int]]:
    """Per radius level, one environment identifier per atom."""
    ids = [
        _hash_ints((
            _ELEMENT_CODE.get(a.element, 0),
            a.charge + 8,
            a.degree,
            a.h_count,
            1 if a.aromatic else 0,
            1 if a.in_ring else 0,
        ))
        for a in m.atoms
    ]
    levels = [list(ids)]
    for _ in range(radius):
        nxt = []
        for i in range(m.num_atoms):
            parts = []
            for bi in m.neighbors[i]:
                b = m.bonds[bi]
                j = b.b if b.a == i else b.a
                parts.append((_ORDER_CODE[b.order], ids[j]))
            parts.sort()
            flat = [ids[i]]
            for code, nid in parts:
                flat.append(code)
                flat.append(nid)
            nxt.append(_hash_ints(flat))
        ids = nxt
        levels.append(list(ids))
    return levels


def morgan_fingerprint(m: MolGraph, radius: int = 2, nbits: int = 2048) -> Fingerprint:
    """Fold every (atom, level <= radius) environment id into the bitset.

    Duplicate environments across radius levels each set their bit; no
    deduplication across levels.
    """
    if not 0 <= radius <= 4:
        raise ParameterError("radius must be in [0, 4]")
    if nbits not in VALID_NBITS:
        raise ParameterError(f"nbits must be one of {VALID_NBITS}")
    bits = 0
    for level in atom_environment_ids(m, radius):
        for env in level:
            bits |= 1 << (env % nbits)
    return Fingerprint(bits=bits, nbits=nbits, radius=radius)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    """|intersection| / |union|; 1.0 when both fingerprints are empty."""
    if a.nbits != b.nbits or a.radius != b.radius:
        raise ShapeError(
            f"fingerprint parameters differ: ({a.nbits},{a.radius}) vs "
            f"({b.nbits},{b.radius})"
        )
    union = (a.bits | b.bits).bit_count()
    if union == 0:
        return 1.0
    return (a.bits & b.bits).bit_count() / union


def nn_similarity(query: Fingerprint, pool: list[Fingerprint]) -> tuple[float, int]:
    """Maximum Tanimoto over the pool; ties broken by lowest index."""
    if not pool:
        raise EmptyPoolError("nearest-neighbor search over an empty pool")
    best_sim = -1.0
    best_idx = -1
    for i, fp in enumerate(pool):
        s = tanimoto(query, fp)
        if s > best_sim:
            best_sim = s
            best_idx = i
    return best_sim, best_idx


def one_nn_scores(train_actives: list[Fingerprint],
                  test: list[Fingerprint]) -> list[float]:
    """Score each test item by its best similarity to any training active."""
    if not train_actives:
        raise EmptyPoolError("no training actives")
    return [nn_similarity(q, train_actives)[0] for q in test]


def write_fingerprint_file(path, entries, nbits: int, radius: int):
    """One line per molecule: '<canonical form>\\t<hex bitset>'.

    ``entries`` yields (canonical_text, Fingerprint) pairs. A single comment
    header records the parameters so the file is self-describing.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# nbits={nbits} radius={radius}\n")
        for canon, fp in entries:
            if fp.nbits != nbits or fp.radius != radius:
                raise ShapeError("entry parameters differ from file header")
            fh.write(f"{canon}\t{fp.to_hex()}\n")


def read_fingerprint_file(path) -> tuple[list[tuple[str, Fingerprint]], int, int]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("#"):
            raise ShapeError("missing fingerprint file header")
        fields = dict(part.split("=") for part in header[1:].split())
        nbits = int(fields["nbits"])
        radius = int(fields["radius"])
        out = []
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            canon, hexpart = line.split("\t")
            out.append((canon, Fingerprint.from_hex(hexpart, nbits, radius)))
    return out, nbits, radius
