"""Random molecule-like test systems with a known additive energy."""

from __future__ import annotations

import numpy as np

from .data import Dataset, Molecule

ELEMENT_POOL = (1, 6, 7, 8, 16, 17)
# arbitrary per-element offsets (kcal/mol-like magnitudes)
_SELF_ENERGY = {1: -70.0, 6: -150.0, 7: -120.0, 8: -110.0, 16: -90.0, 17: -60.0}


def random_molecule(
    rng: np.random.Generator,
    n_atoms: int,
    mol_id: str = "mol",
    elements=ELEMENT_POOL,
    box: float = 4.0,
    min_distance: float = 0.9,
) -> Molecule:
    """Atoms placed uniformly in a cube, rejecting near-coincident placements."""
    coords = []
    while len(coords) < n_atoms:
        p = rng.uniform(0.0, box, size=3)
        if all(np.linalg.norm(p - q) >= min_distance for q in coords):
            coords.append(p)
    z = rng.choice(elements, size=n_atoms)
    return Molecule(mol_id, z, np.array(coords))


def toy_energy(mol: Molecule) -> float:
    """Smooth additive energy: element offsets plus a short-range pair term."""
    z = mol.atomic_numbers
    r = mol.coordinates
    e = sum(_SELF_ENERGY.get(int(zi), -50.0) for zi in z)
    for i in range(len(z)):
        for j in range(i + 1, len(z)):
            d = np.linalg.norm(r[i] - r[j])
            e -= 0.2 * np.sqrt(z[i] * z[j]) * np.exp(-d)
    return float(e)


def random_dataset(
    seed: int,
    size: int,
    n_atoms=(3, 12),
    elements=ELEMENT_POOL,
    box: float = 4.0,
    unit: str = "angstrom",
) -> Dataset:
    rng = np.random.default_rng(seed)
    mols = []
    for i in range(size):
        n = int(rng.integers(n_atoms[0], n_atoms[1] + 1))
        m = random_molecule(rng, n, f"syn{i:04d}", elements, box)
        mols.append(Molecule(m.id, m.atomic_numbers, m.coordinates,
                             {"atomization_energy": toy_energy(m), "atom_count": float(n)}))
    return Dataset(tuple(mols), unit, f"synthetic{seed}")
