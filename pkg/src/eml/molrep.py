"""Molecules, XYZ parsing, the Coulomb matrix and representation vector files."""

from __future__ import annotations

import builtins
import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import AtomOverflow, CoincidentAtoms, LengthMismatch, ParseError

ANGSTROM_TO_BOHR = 1.8897259886
DEFAULT_N_MAX = 26
COINCIDENT_TOL = 1e-10

_SYMBOLS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()
PERIODIC_TABLE = {s: z for z, s in enumerate(_SYMBOLS, start=1)}
SYMBOL_OF = {z: s for s, z in PERIODIC_TABLE.items()}


def atomic_number(symbol: str) -> int:
    """Nuclear charge for an element symbol (case-insensitive) or a numeric Z."""
    s = symbol.strip()
    if s.isdigit():
        z = int(s)
        if z in SYMBOL_OF:
            return z
        raise KeyError(symbol)
    return PERIODIC_TABLE[s[:1].upper() + s[1:].lower()]


@dataclass
class Atom:
    symbol: str
    Z: int
    position: tuple

    def __post_init__(self):
        if self.Z < 1:
            raise ValueError("nuclear charge must be >= 1")
        if len(self.position) != 3 or not all(math.isfinite(c) for c in self.position):
            raise ValueError("positions must be three finite reals")


@dataclass
class Molecule:
    atoms: list
    property: Optional[float] = None
    name: str = ""
    comment: str = ""

    def __len__(self):
        return len(self.atoms)

    @builtins.property
    def charges(self) -> np.ndarray:
        return np.array([a.Z for a in self.atoms], dtype=float)

    @builtins.property
    def positions(self) -> np.ndarray:
        return np.array([a.position for a in self.atoms], dtype=float).reshape(-1, 3)

    @classmethod
    def from_arrays(cls, Z: Sequence[int], R, property=None, name="") -> "Molecule":
        atoms = [Atom(SYMBOL_OF[int(z)], int(z), tuple(float(c) for c in r)) for z, r in zip(Z, R)]
        return cls(atoms, property, name)


@dataclass
class RepVector:
    values: np.ndarray
    kind: str = "external"

    def __len__(self):
        return len(self.values)


# -- XYZ -------------------------------------------------------------------------

def _float(tok: str, lineno: int) -> float:
    try:
        x = float(tok.replace("*^", "e"))
    except ValueError:
        raise ParseError(f"non-numeric coordinate {tok!r}", lineno) from None
    if not math.isfinite(x):
        raise ParseError(f"non-finite coordinate {tok!r}", lineno)
    return x


def parse_xyz(text: str, property_from_comment: Optional[int] = None,
              trailer_lines: int = 0, n_max: Optional[int] = None) -> list:
    """Parse one or more concatenated XYZ blocks.

    ``property_from_comment`` picks a whitespace-separated token of the
    comment line as the molecule's property. ``trailer_lines`` skips extra
    lines after each block (3 for raw QM9 files: frequencies, SMILES, InChI).
    """
    lines = text.splitlines()
    mols = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        count_line = i + 1
        try:
            n = int(lines[i].split()[0])
        except ValueError:
            raise ParseError(f"expected an atom count, got {lines[i].strip()!r}", count_line) from None
        if n < 0:
            raise ParseError("negative atom count", count_line)
        if n_max is not None and n > n_max:
            raise AtomOverflow(f"block at line {count_line} has {n} atoms (n_max={n_max})")
        if i + 1 >= len(lines) and n > 0:
            raise ParseError("missing comment line", count_line + 1)
        comment = lines[i + 1] if i + 1 < len(lines) else ""
        prop = None
        if property_from_comment is not None:
            toks = comment.split()
            try:
                prop = _float(toks[property_from_comment], i + 2)
            except IndexError:
                raise ParseError("comment line lacks the property field", i + 2) from None
        atoms = []
        for k in range(n):
            ln = i + 2 + k
            if ln >= len(lines) or not lines[ln].strip():
                raise ParseError(f"block declares {n} atoms but only {k} follow", ln + 1)
            toks = lines[ln].split()
            try:
                z = atomic_number(toks[0])
            except (KeyError, IndexError):
                raise ParseError(f"unknown element {toks[0] if toks else ''!r}", ln + 1) from None
            if len(toks) < 4:
                raise ParseError("atom line needs an element and three coordinates", ln + 1)
            pos = tuple(_float(t, ln + 1) for t in toks[1:4])
            atoms.append(Atom(SYMBOL_OF[z], z, pos))
        name = comment.split()[0] if comment.split() else f"mol{len(mols)}"
        mols.append(Molecule(atoms, prop, name=name, comment=comment))
        i += 2 + n + trailer_lines
    return mols


def read_xyz(path, **kwargs) -> list:
    return parse_xyz(Path(path).read_text(), **kwargs)


def format_xyz(mol: Molecule) -> str:
    out = [str(len(mol.atoms)), mol.comment or mol.name]
    for a in mol.atoms:
        out.append(f"{a.symbol:<2} {a.position[0]: .8f} {a.position[1]: .8f} {a.position[2]: .8f}")
    return "\n".join(out) + "\n"


# -- Coulomb matrix ---------------------------------------------------------------

def cm_length(n_max: int) -> int:
    return n_max * (n_max + 1) // 2


def coulomb_matrix(mol: Molecule, n_max: int = DEFAULT_N_MAX) -> RepVector:
    """Sorted Coulomb matrix, upper triangle (with diagonal) flattened row by row.

    Diagonal ``0.5 Z**2.4``; off-diagonal ``Z_i Z_j / |R_i - R_j|`` with the
    distance in Bohr. Rows are ordered by descending norm, ties by descending
    charge and then by position.
    """
    n = len(mol.atoms)
    if n > n_max:
        raise AtomOverflow(f"{n} atoms exceed n_max={n_max}")
    Z = mol.charges
    R = mol.positions
    C = np.zeros((n_max, n_max))
    if n:
        diff = R[:, None, :] - R[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        off = ~np.eye(n, dtype=bool)
        if np.any(dist[off] < COINCIDENT_TOL):
            raise CoincidentAtoms("two atoms share a position")
        with np.errstate(divide="ignore"):
            M = np.outer(Z, Z) / (dist * ANGSTROM_TO_BOHR)
        M[np.diag_indices(n)] = 0.5 * Z ** 2.4
        norms = np.linalg.norm(M, axis=1)
        keys = sorted(range(n), key=lambda i: (-norms[i], -Z[i], tuple(R[i])))
        order = np.array(keys)
        C[:n, :n] = M[np.ix_(order, order)]
    iu = np.triu_indices(n_max)
    return RepVector(C[iu], "CM")


def coulomb_matrices(mols: Iterable[Molecule], n_max: int = DEFAULT_N_MAX) -> np.ndarray:
    return np.array([coulomb_matrix(m, n_max).values for m in mols])


# -- vector files -------------------------------------------------------------------

VEC_MAGIC = b"EMLV"
KIND_CODES = {"CM": 0, "external": 1}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
_VEC_HEADER = struct.Struct("<4sIIB")


def save_vectors(path, X: np.ndarray, kind: str = "external") -> None:
    """Binary layout: magic "EMLV", u32 count, u32 L, u8 kind, then f64 LE values."""
    X = np.asarray(X, dtype="<f8")
    if X.ndim != 2:
        raise LengthMismatch("expected a 2-D array of vectors")
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as fh:
            fh.write(f"# kind={kind} count={X.shape[0]} L={X.shape[1]}\n")
            w = csv.writer(fh)
            for row in X:
                w.writerow([repr(float(v)) for v in row])
        return
    with open(path, "wb") as fh:
        fh.write(_VEC_HEADER.pack(VEC_MAGIC, X.shape[0], X.shape[1], KIND_CODES.get(kind, 1)))
        fh.write(X.tobytes())


def load_vector_matrix(path) -> tuple[np.ndarray, str]:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _load_csv_vectors(path)
    data = path.read_bytes()
    if len(data) < _VEC_HEADER.size:
        raise ParseError("vector file shorter than its header")
    magic, count, L, kind = _VEC_HEADER.unpack_from(data)
    if magic != VEC_MAGIC:
        raise ParseError("bad magic; not an EMLV vector file")
    payload = data[_VEC_HEADER.size:]
    if len(payload) != count * L * 8:
        raise LengthMismatch(f"header declares {count}x{L} values but payload holds {len(payload) // 8}")
    X = np.frombuffer(payload, dtype="<f8").reshape(count, L).astype(float)
    if not np.all(np.isfinite(X)):
        bad = int(np.argwhere(~np.isfinite(X))[0][0])
        raise ParseError(f"vector {bad} contains a non-finite value")
    return X, KIND_NAMES.get(kind, "external")


def _load_csv_vectors(path: Path) -> tuple[np.ndarray, str]:
    kind, count, L = "external", None, None
    rows = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                for tok in s[1:].split():
                    k, _, v = tok.partition("=")
                    if k == "kind":
                        kind = v
                    elif k == "count":
                        count = int(v)
                    elif k == "L":
                        L = int(v)
                continue
            try:
                row = [float(t) for t in s.split(",")]
            except ValueError:
                raise ParseError("non-numeric entry", lineno) from None
            if not all(math.isfinite(x) for x in row):
                raise ParseError("non-finite entry", lineno)
            if L is not None and len(row) != L:
                raise LengthMismatch(f"line {lineno}: {len(row)} entries, header says L={L}")
            rows.append(row)
    if count is not None and len(rows) != count:
        raise LengthMismatch(f"header declares {count} vectors, file holds {len(rows)}")
    if rows and len({len(r) for r in rows}) != 1:
        raise LengthMismatch("vectors of unequal length")
    return np.array(rows, dtype=float).reshape(len(rows), L or (len(rows[0]) if rows else 0)), kind


def load_vectors(path) -> list:
    X, kind = load_vector_matrix(path)
    return [RepVector(x, kind) for x in X]


def truncate_vectors(vs, L: int):
    """Keep the first ``L`` entries of every vector (list of RepVector or 2-D array)."""
    if isinstance(vs, np.ndarray):
        if L > vs.shape[-1] or L < 1:
            raise LengthMismatch(f"cannot truncate length {vs.shape[-1]} to {L}")
        return vs[..., :L].copy()
    out = []
    for v in vs:
        if L > len(v.values) or L < 1:
            raise LengthMismatch(f"cannot truncate length {len(v.values)} to {L}")
        out.append(RepVector(np.array(v.values[:L]), v.kind))
    return out


# -- properties sidecar ---------------------------------------------------------------

@dataclass
class PropertyTable:
    values: dict = field(default_factory=dict)
    unit: str = ""

    def __getitem__(self, key):
        return self.values[key]


def read_properties(path) -> PropertyTable:
    """CSV with header ``id,value,unit``."""
    table = PropertyTable()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["id", "value"]:
            raise ParseError("properties CSV must start with an id,value[,unit] header", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                table.values[row[0]] = float(row[1])
            except (IndexError, ValueError):
                raise ParseError("malformed property row", lineno) from None
            if len(row) > 2 and row[2]:
                table.unit = row[2]
    return table


def write_properties(path, ids: Sequence[str], values: Sequence[float], unit: str = "kcal/mol"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "value", "unit"])
        for i, v in zip(ids, values):
            w.writerow([i, repr(float(v)), unit])
