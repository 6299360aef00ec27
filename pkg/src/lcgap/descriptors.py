"""Localized Coulomb-matrix descriptors of atomic neighborhoods.

Three per-atom encodings are provided, all padded with zero-charge dummy
atoms to a fixed maximum occupancy ``m``:

``localized``
    Coulomb matrix of the neighborhood with off-diagonal ``Z_j Z_k / r_jk**alpha``,
    rows 2..m sorted by descending norm, upper triangle packed row-wise.
``decaying``
    As above but every entry except (1, 1) decays with the perimeter of the
    triangle formed with the central atom.
``reduced``
    First row plus diagonal of the decaying matrix with neighbors ordered by
    distance to the centre; length ``2m - 1``.

The plain molecular Coulomb matrix (``global_coulomb_matrix``) is kept as a
reference.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .data import MIN_DISTANCE, Dataset, DataError, Molecule

KINDS = ("localized", "decaying", "reduced", "global_reference")
DIAGONAL_EXPONENT = 2.4
DEFAULT_HEADROOM = 2


class OccupancyError(DataError):
    """An atom has more neighbors within the cutoff than ``m - 1``."""

    def __init__(self, molecule_id, atom_index, occupancy, max_occupancy):
        self.molecule_id = molecule_id
        self.atom_index = atom_index
        self.occupancy = occupancy
        self.max_occupancy = max_occupancy
        super().__init__(
            f"molecule {molecule_id!r}, atom {atom_index}: neighborhood occupancy "
            f"{occupancy} exceeds maximum occupancy m={max_occupancy}"
        )


@dataclass(frozen=True)
class DescriptorConfig:
    kind: str = "reduced"
    alpha: float = 5.0
    r_cut: float = 6.0
    max_occupancy: int = 20

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown descriptor kind {self.kind!r}")
        if self.kind == "global_reference":
            object.__setattr__(self, "alpha", 1.0)
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.r_cut > 0:
            raise ValueError("r_cut must be positive")
        if int(self.max_occupancy) != self.max_occupancy or self.max_occupancy < 1:
            raise ValueError("max_occupancy must be a positive integer")
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "r_cut", float(self.r_cut))
        object.__setattr__(self, "max_occupancy", int(self.max_occupancy))

    @property
    def length(self) -> int:
        return descriptor_length(self.kind, self.max_occupancy)

    def with_occupancy(self, m: int) -> "DescriptorConfig":
        return replace(self, max_occupancy=m)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "alpha": self.alpha,
            "r_cut": self.r_cut,
            "max_occupancy": self.max_occupancy,
        }


def descriptor_length(kind: str, m: int) -> int:
    if kind == "reduced":
        return 2 * m - 1
    return m * (m + 1) // 2


@dataclass(frozen=True, eq=False)
class Neighborhood:
    """Central atom followed by its neighbors, nearest first.

    Dummy padding up to ``padded_size`` is implicit: only real atoms are
    stored.
    """

    center_index: int
    atomic_numbers: np.ndarray
    coordinates: np.ndarray
    padded_size: int

    @property
    def occupancy(self) -> int:
        return len(self.atomic_numbers)

    @property
    def members(self):
        return list(zip(self.atomic_numbers.tolist(), self.coordinates))


@dataclass(frozen=True, eq=False)
class NeighborhoodDescriptor:
    values: np.ndarray
    kind: str

    @property
    def d(self) -> int:
        return len(self.values)


def _neighbor_order(mol: Molecule, i: int, r_cut: float):
    """Indices of atoms within ``r_cut`` of atom ``i`` and their distances."""
    r = mol.coordinates
    dist = np.sqrt(((r - r[i]) ** 2).sum(axis=1))
    idx = np.flatnonzero(dist <= r_cut)
    idx = idx[idx != i]
    # lexsort: last key is primary -> distance, then original index
    idx = idx[np.lexsort((idx, dist[idx]))]
    return idx, dist[idx]


def neighbor_counts(mol: Molecule, r_cut: float) -> np.ndarray:
    """Number of other atoms within ``r_cut`` for every atom."""
    r = mol.coordinates
    dist = np.sqrt(((r[:, None, :] - r[None, :, :]) ** 2).sum(axis=-1))
    return (dist <= r_cut).sum(axis=1) - 1


def extract_neighborhood(mol: Molecule, i: int, cfg: DescriptorConfig) -> Neighborhood:
    if not 0 <= i < mol.n_atoms:
        raise IndexError(f"atom index {i} out of range for {mol.n_atoms} atoms")
    idx, dist = _neighbor_order(mol, i, cfg.r_cut)
    if len(idx) + 1 > cfg.max_occupancy:
        raise OccupancyError(mol.id, i, len(idx) + 1, cfg.max_occupancy)
    if len(dist) and dist[0] < MIN_DISTANCE:
        raise DataError(f"molecule {mol.id!r}: atoms {i} and {idx[0]} coincide")
    members = np.concatenate([[i], idx])
    return Neighborhood(
        i,
        mol.atomic_numbers[members].astype(np.float64),
        mol.coordinates[members],
        cfg.max_occupancy,
    )


def _pair_distances(coords: np.ndarray) -> np.ndarray:
    d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=-1))
    off = ~np.eye(len(coords), dtype=bool)
    if np.any(d[off] < MIN_DISTANCE):
        raise DataError("coincident atoms in neighborhood")
    return d


def localized_matrix(nb: Neighborhood, cfg: DescriptorConfig) -> np.ndarray:
    """Neighborhood Coulomb matrix with distance exponent ``alpha``, padded to m x m."""
    m, k = nb.padded_size, nb.occupancy
    z = nb.atomic_numbers
    d = _pair_distances(nb.coordinates)
    np.fill_diagonal(d, 1.0)
    block = np.outer(z, z) / d**cfg.alpha
    np.fill_diagonal(block, 0.5 * z**DIAGONAL_EXPONENT)
    out = np.zeros((m, m))
    out[:k, :k] = block
    return out


def decaying_matrix(nb: Neighborhood, cfg: DescriptorConfig) -> np.ndarray:
    """Coulomb-like matrix whose entries decay with the distance to the centre.

    Entry (j, k) divides ``Z_j Z_k`` by ``(r_1j + r_1k + r_jk) ** alpha``; only
    the central diagonal entry keeps the ``0.5 Z**2.4`` self term.
    """
    m, k = nb.padded_size, nb.occupancy
    z = nb.atomic_numbers
    d = _pair_distances(nb.coordinates)
    to_center = d[0]
    perimeter = to_center[:, None] + to_center[None, :] + d
    perimeter[0, 0] = 1.0
    block = np.outer(z, z) / perimeter**cfg.alpha
    block[0, 0] = 0.5 * z[0] ** DIAGONAL_EXPONENT
    out = np.zeros((m, m))
    out[:k, :k] = block
    return out


def permute_by_row_norm(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Keep row/column 0 first and order the rest by descending row norm.

    Returns the permuted matrix and the permutation ``perm`` such that the
    result equals ``M[perm][:, perm]``. Ties keep their original order.
    """
    M = np.asarray(M, dtype=np.float64)
    norms = np.sqrt((M**2).sum(axis=1))
    rest = np.arange(1, len(M))
    rest = rest[np.argsort(-norms[1:], kind="stable")]
    perm = np.concatenate([[0], rest]).astype(np.int64)
    return M[np.ix_(perm, perm)], perm


def pack_upper_triangle(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("expected a square matrix")
    scale = max(np.abs(M).max(initial=0.0), 1.0)
    if np.abs(M - M.T).max(initial=0.0) > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    return M[np.triu_indices(len(M))]


def reduced_descriptor(nb: Neighborhood, cfg: DescriptorConfig) -> NeighborhoodDescriptor:
    M = decaying_matrix(nb, cfg)
    values = np.concatenate([M[0], np.diag(M)[1:]])
    return NeighborhoodDescriptor(values, "reduced")


def _from_neighborhood(nb: Neighborhood, cfg: DescriptorConfig) -> NeighborhoodDescriptor:
    if cfg.kind == "reduced":
        return reduced_descriptor(nb, cfg)
    if cfg.kind == "localized":
        M = localized_matrix(nb, cfg)
    elif cfg.kind == "decaying":
        M = decaying_matrix(nb, cfg)
    else:
        raise ValueError(f"{cfg.kind!r} is not a per-atom descriptor kind")
    C, _ = permute_by_row_norm(M)
    return NeighborhoodDescriptor(pack_upper_triangle(C), cfg.kind)


def compute_descriptor(mol: Molecule, i: int, cfg: DescriptorConfig) -> NeighborhoodDescriptor:
    return _from_neighborhood(extract_neighborhood(mol, i, cfg), cfg)


def molecule_descriptors(mol: Molecule, cfg: DescriptorConfig) -> np.ndarray:
    """Descriptor matrix of shape (n_atoms, d) for every atom of ``mol``."""
    out = np.empty((mol.n_atoms, cfg.length))
    for i in range(mol.n_atoms):
        out[i] = compute_descriptor(mol, i, cfg).values
    return out


def global_coulomb_matrix(mol: Molecule) -> np.ndarray:
    z = mol.atomic_numbers.astype(np.float64)
    d = _pair_distances(mol.coordinates)
    np.fill_diagonal(d, 1.0)
    M = np.outer(z, z) / d
    np.fill_diagonal(M, 0.5 * z**DIAGONAL_EXPONENT)
    return M


def auto_max_occupancy(
    datasets: Dataset | Iterable[Dataset], cfg: DescriptorConfig, headroom: int = DEFAULT_HEADROOM
) -> int:
    """Smallest safe ``m`` for every atom in ``datasets``, plus ``headroom``."""
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    most = 0
    for d in datasets:
        for mol in d:
            most = max(most, int(neighbor_counts(mol, cfg.r_cut).max()))
    return 1 + most + headroom


class DescriptorCache:
    """Per-molecule descriptor matrices keyed by (kind, alpha, r_cut, m)."""

    def __init__(self):
        self._store: dict = {}

    def get(self, mol: Molecule, cfg: DescriptorConfig) -> np.ndarray:
        key = (cfg.kind, cfg.alpha, cfg.r_cut, cfg.max_occupancy, mol.id, id(mol))
        hit = self._store.get(key)
        if hit is None:
            hit = molecule_descriptors(mol, cfg)
            hit.setflags(write=False)
            self._store[key] = hit
        return hit

    def groups(self, d: Dataset, cfg: DescriptorConfig) -> list[np.ndarray]:
        return [self.get(mol, cfg) for mol in d]


def write_descriptor_dump(path, d: Dataset, cfg: DescriptorConfig) -> None:
    """CSV dump: molecule_id, atom_index, kind, alpha, r_cut, m, v_0..v_{d-1}."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["molecule_id", "atom_index", "kind", "alpha", "r_cut", "m"]
            + [f"v_{j}" for j in range(cfg.length)]
        )
        for mol in d:
            for i, row in enumerate(molecule_descriptors(mol, cfg)):
                w.writerow(
                    [mol.id, i, cfg.kind, repr(cfg.alpha), repr(cfg.r_cut), cfg.max_occupancy]
                    + [repr(float(v)) for v in row]
                )
