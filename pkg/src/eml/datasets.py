"""Synthetic QM9-like molecules and a long FCHL-style representation.

No QM9 download is available offline, so :func:`synthetic_qm9` builds small
organic molecules (up to 9 heavy atoms from C, N, O, F, saturated with H)
on random valence-respecting graphs with textbook bond lengths and
perturbed geometries. The target is a surrogate atomization energy in
kcal/mol: Morse bond terms with tabulated dissociation energies plus a
weak non-bonded pair term, so it depends on both composition and geometry.
:func:`long_representation` produces FCHL19-style two- and three-body
atomic environments (18720 entries for 26 atom slots), a stand-in for
flattened FCHL19 vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import AtomOverflow
from .molrep import DEFAULT_N_MAX, SYMBOL_OF, Molecule, coulomb_matrices

VALENCE = {1: 1, 6: 4, 7: 3, 8: 2, 9: 1}
HEAVY = (6, 7, 8, 9)
HEAVY_P = (0.70, 0.13, 0.14, 0.03)

# equilibrium bond lengths (Angstrom) by (Z_low, Z_high, order)
BOND_LENGTH = {
    (1, 6, 1): 1.09, (1, 7, 1): 1.01, (1, 8, 1): 0.96,
    (6, 6, 1): 1.54, (6, 6, 2): 1.34, (6, 6, 3): 1.20,
    (6, 7, 1): 1.47, (6, 7, 2): 1.28, (6, 7, 3): 1.16,
    (6, 8, 1): 1.43, (6, 8, 2): 1.23, (6, 9, 1): 1.35,
    (7, 7, 1): 1.45, (7, 7, 2): 1.25, (7, 8, 1): 1.40, (7, 9, 1): 1.36,
    (8, 8, 1): 1.48, (8, 9, 1): 1.42,
}
# bond dissociation energies (kcal/mol)
BOND_ENERGY = {
    (1, 6, 1): 99.0, (1, 7, 1): 93.0, (1, 8, 1): 111.0,
    (6, 6, 1): 83.0, (6, 6, 2): 146.0, (6, 6, 3): 200.0,
    (6, 7, 1): 73.0, (6, 7, 2): 147.0, (6, 7, 3): 213.0,
    (6, 8, 1): 86.0, (6, 8, 2): 178.0, (6, 9, 1): 116.0,
    (7, 7, 1): 39.0, (7, 7, 2): 100.0, (7, 8, 1): 53.0, (7, 9, 1): 65.0,
    (8, 8, 1): 34.0, (8, 9, 1): 45.0,
}
MORSE_A = 1.9  # 1/Angstrom
TETRAHEDRAL = math.radians(109.5)


def _bond_key(z1: int, z2: int, order: int) -> tuple:
    a, b = sorted((z1, z2))
    return (a, b, order)


@dataclass
class SyntheticSet:
    molecules: list
    energies: np.ndarray
    unit: str = "kcal/mol"

    def __len__(self):
        return len(self.molecules)


def _random_graph(rng: np.random.Generator, n_heavy: int, n_max: int):
    for _ in range(200):
        Z = list(rng.choice(HEAVY, size=n_heavy, p=HEAVY_P))
        if n_heavy > 1 and Z[0] == 9:
            Z[0] = 6
        free = [VALENCE[z] for z in Z]
        bonds = []  # (i, j, order)
        ok = True
        for i in range(1, n_heavy):
            cands = [j for j in range(i) if free[j] > 0]
            if not cands or free[i] == 0:
                ok = False
                break
            j = int(rng.choice(cands))
            bonds.append([j, i, 1])
            free[i] -= 1
            free[j] -= 1
        if not ok:
            continue
        # occasional unsaturation
        for b in bonds:
            i, j = b[0], b[1]
            if free[i] > 0 and free[j] > 0 and rng.random() < 0.25:
                order = 2 if rng.random() < 0.85 else 3
                order = min(order, 1 + min(free[i], free[j]))
                if _bond_key(Z[i], Z[j], order) in BOND_LENGTH:
                    free[i] -= order - 1
                    free[j] -= order - 1
                    b[2] = order
        n_h = sum(free)
        if n_heavy + n_h > n_max:
            continue
        atoms = list(Z)
        for i in range(n_heavy):
            for _ in range(free[i]):
                atoms.append(1)
                bonds.append([i, len(atoms) - 1, 1])
        return atoms, [tuple(b) for b in bonds]
    raise RuntimeError("could not build a molecule within the atom limit")


def _embed(rng: np.random.Generator, Z: list, bonds: list, noise: float):
    n = len(Z)
    nbrs = {i: [] for i in range(n)}
    for i, j, o in bonds:
        nbrs[i].append((j, o))
        nbrs[j].append((i, o))
    for _attempt in range(50):
        pos = np.full((n, 3), np.nan)
        pos[0] = 0.0
        placed = [0]
        queue = [0]
        failed = False
        while queue and not failed:
            i = queue.pop(0)
            for j, o in nbrs[i]:
                if not np.isnan(pos[j, 0]):
                    continue
                r = BOND_LENGTH[_bond_key(Z[i], Z[j], o)]
                existing = [pos[k] - pos[i] for k, _ in nbrs[i] if not np.isnan(pos[k, 0])]
                V = rng.normal(size=(24, 3))
                V /= np.linalg.norm(V, axis=1, keepdims=True)
                cands = pos[i] + r * V
                if existing:
                    E = np.array(existing)
                    E /= np.linalg.norm(E, axis=1, keepdims=True)
                    ang = np.arccos(np.clip(V @ E.T, -1.0, 1.0)).min(axis=1)
                else:
                    ang = np.full(len(V), math.pi)
                dmin = np.linalg.norm(cands[:, None] - pos[placed][None], axis=-1).min(axis=1)
                score = -np.abs(ang - TETRAHEDRAL) + np.minimum(dmin, 2.2)
                score[dmin <= 0.95] = -np.inf
                k = int(np.argmax(score))
                if not np.isfinite(score[k]):
                    failed = True
                    break
                best = cands[k]
                pos[j] = best
                placed.append(j)
                queue.append(j)
        if failed or np.isnan(pos).any():
            continue
        pos = pos + rng.normal(scale=noise, size=pos.shape)
        d = np.linalg.norm(pos[:, None] - pos[None], axis=-1) + np.eye(n) * 9
        if d.min() > 0.7:
            return pos - pos.mean(axis=0)
    raise RuntimeError("embedding failed")


def surrogate_energy(Z: list, R: np.ndarray, bonds: list) -> float:
    """Surrogate atomization energy (kcal/mol, negative = bound)."""
    e = 0.0
    bonded = set()
    for i, j, o in bonds:
        key = _bond_key(Z[i], Z[j], o)
        De, re = BOND_ENERGY[key], BOND_LENGTH[key]
        r = float(np.linalg.norm(R[i] - R[j]))
        e -= De * (1.0 - (1.0 - math.exp(-MORSE_A * (r - re))) ** 2)
        bonded.add((min(i, j), max(i, j)))
    n = len(Z)
    D = np.linalg.norm(R[:, None] - R[None], axis=-1)
    zz = np.sqrt(np.outer(Z, Z).astype(float))
    pair = np.triu(np.ones((n, n), dtype=bool), 1)
    for i, j in bonded:
        pair[i, j] = False
    # weak attraction plus short-range repulsion between non-bonded atoms
    d = D[pair]
    e += float(np.sum(zz[pair] * (2.5 * np.exp(-2.0 * (d - 1.2)) - 1.2 * np.exp(-0.8 * (d - 1.2)))))
    return e


def synthetic_qm9(n: int, seed: int = 0, n_max: int = DEFAULT_N_MAX, noise: float = 0.06,
                  max_heavy: int = 9) -> SyntheticSet:
    """``n`` random molecules with surrogate atomization energies."""
    rng = np.random.default_rng(seed)
    mols, energies = [], []
    sizes = np.arange(3, max_heavy + 1)
    weights = sizes.astype(float) ** 3
    weights /= weights.sum()
    while len(mols) < n:
        nh = int(rng.choice(sizes, p=weights))
        try:
            Z, bonds = _random_graph(rng, nh, n_max)
            R = _embed(rng, Z, bonds, noise)
        except RuntimeError:
            continue
        E = surrogate_energy(Z, R, bonds)
        idx = len(mols)
        formula = "".join(SYMBOL_OF[z] for z in sorted(Z, reverse=True))
        mols.append(Molecule.from_arrays(Z, R, property=E, name=f"syn{idx:06d}"))
        mols[-1].comment = f"syn{idx:06d} {E:.6f} {formula}"
        energies.append(E)
    return SyntheticSet(mols, np.array(energies))


ELEMENTS = (1, 6, 7, 8, 9)
ELEMENT_PAIRS = tuple((a, b) for i, a in enumerate(ELEMENTS) for b in ELEMENTS[i:])

# FCHL19-like defaults (two-body log-normal basis, three-body radial x Fourier)
N_TWO = 24
N_THREE = 20
R_CUT = 8.0
ETA2 = 0.32
ETA3 = 2.7
DECAY2 = 1.8
DECAY3 = 0.57
WEIGHT3 = 13.4


def long_length(n_max: int = DEFAULT_N_MAX) -> int:
    return n_max * (len(ELEMENTS) * N_TWO + len(ELEMENT_PAIRS) * N_THREE * 2)


def _cutoff(r):
    return 0.5 * (np.cos(np.pi * r / R_CUT) + 1.0) * (r < R_CUT)


def long_representation(mol: Molecule, n_max: int = DEFAULT_N_MAX) -> np.ndarray:
    """FCHL19-style atomic environments, flattened (length 720 per atom slot).

    Per atom: for each neighbour element a two-body log-normal radial basis
    damped by ``r**-1.8``; for each element pair a three-body radial basis on
    the mean arm length times ``cos`` and ``sin`` of the angle, weighted by
    an Axilrod-Teller factor. Slots are ordered by descending charge, then
    by descending sum of inverse distances, and zero-padded to ``n_max``.
    """
    Z = mol.charges.astype(int)
    R = mol.positions
    n = len(Z)
    n2, n3 = len(ELEMENTS) * N_TWO, len(ELEMENT_PAIRS) * N_THREE * 2
    out = np.zeros((n_max, n2 + n3))
    if n == 0:
        return out.ravel()
    if n > n_max:
        raise AtomOverflow(f"{n} atoms exceed n_max={n_max}")
    rs2 = np.linspace(0, R_CUT, N_TWO + 1)[1:]
    rs3 = np.linspace(0, R_CUT, N_THREE + 1)[1:]
    elem_idx = np.array([ELEMENTS.index(z) for z in Z])
    pair_idx = {pr: k for k, pr in enumerate(ELEMENT_PAIRS)}
    V = R[None, :, :] - R[:, None, :]  # V[i, j] = R_j - R_i
    D = np.linalg.norm(V, axis=-1)
    off = ~np.eye(n, dtype=bool)
    with np.errstate(divide="ignore"):
        inv = np.where(off, 1.0 / np.where(off, D, 1.0), 0.0)
    order = sorted(range(n), key=lambda i: (-Z[i], -inv[i].sum()))
    for slot, i in enumerate(order):
        row = out[slot]
        js = np.flatnonzero(off[i] & (D[i] < R_CUT))
        if js.size == 0:
            continue
        r = D[i, js]
        # two-body: log-normal radial basis
        lsig2 = np.log1p(ETA2 / r ** 2)
        mu = np.log(r) - 0.5 * lsig2
        basis = np.exp(-(np.log(rs2)[None] - mu[:, None]) ** 2 / (2 * lsig2[:, None]))
        basis /= np.sqrt(2 * np.pi * lsig2)[:, None] * rs2[None]
        basis *= (_cutoff(r) / r ** DECAY2)[:, None]
        for e in range(len(ELEMENTS)):
            sel = elem_idx[js] == e
            if sel.any():
                row[e * N_TWO:(e + 1) * N_TWO] += basis[sel].sum(axis=0)
        if js.size < 2:
            continue
        # three-body over neighbour pairs j < k
        a, b = np.triu_indices(js.size, 1)
        j, k = js[a], js[b]
        rij, rik, rjk = D[i, j], D[i, k], D[j, k]
        cos_i = np.einsum("ij,ij->i", V[i, j], V[i, k]) / (rij * rik)
        cos_j = np.einsum("ij,ij->i", V[j, i], V[j, k]) / (rij * rjk)
        cos_k = np.einsum("ij,ij->i", V[k, i], V[k, j]) / (rik * rjk)
        theta = np.arccos(np.clip(cos_i, -1.0, 1.0))
        w = WEIGHT3 * (1 + 3 * cos_i * cos_j * cos_k) / (rij * rik * rjk) ** DECAY3
        w *= _cutoff(rij) * _cutoff(rik)
        rad = np.exp(-ETA3 * (0.5 * (rij + rik)[:, None] - rs3[None]) ** 2) * w[:, None]
        za, zb = np.minimum(Z[j], Z[k]), np.maximum(Z[j], Z[k])
        for pr, kk in pair_idx.items():
            sel = (za == pr[0]) & (zb == pr[1])
            if not sel.any():
                continue
            base = n2 + kk * N_THREE * 2
            row[base:base + N_THREE] += (rad[sel] * np.cos(theta[sel])[:, None]).sum(axis=0)
            row[base + N_THREE:base + 2 * N_THREE] += (rad[sel] * np.sin(theta[sel])[:, None]).sum(axis=0)
    return out.ravel()


def long_representations(mols, n_max: int = DEFAULT_N_MAX) -> np.ndarray:
    return np.array([long_representation(m, n_max) for m in mols])


def featurize(mols, kind: str = "CM", n_max: int = DEFAULT_N_MAX) -> np.ndarray:
    if kind == "CM":
        return coulomb_matrices(mols, n_max)
    if kind == "long":
        return long_representations(mols, n_max)
    raise ValueError(f"unknown representation {kind!r}")


def split_indices(n: int, n_test: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Random train/test split: test indices first, the rest for training."""
    perm = np.random.default_rng(seed).permutation(n)
    return perm[n_test:], perm[:n_test]


def maybe_subset(X: np.ndarray, y: np.ndarray, n: Optional[int]):
    return (X, y) if n is None else (X[:n], y[:n])
