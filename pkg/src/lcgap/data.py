"""Molecular datasets: parsing, validation, subsetting and fold construction.

Two on-disk formats are understood:

* ``extxyz`` -- the canonical one. Each record is an atom count line, a
  ``key=value`` metadata line (``id=...``, numeric property keys, optional
  ``unit=angstrom|bohr``) and one ``<symbol-or-Z> x y z`` line per atom.
* ``csv_xyz`` -- one molecule per row, see ``docs/formats.md``.
"""

from __future__ import annotations

import csv
import logging
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

LENGTH_UNITS = ("angstrom", "bohr", "unspecified")
MIN_DISTANCE = 1e-6

# Index = atomic number.
ELEMENTS = (
    "X H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe "
    "Co Ni Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn "
    "Sb Te I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W "
    "Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf "
    "Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og"
).split()
ATOMIC_NUMBERS = {sym.lower(): z for z, sym in enumerate(ELEMENTS) if z > 0}

# metadata keys on the extxyz comment line that are never properties
_RESERVED_KEYS = {"id", "unit", "properties", "pbc", "lattice"}


class DataError(ValueError):
    """Raised for malformed, inconsistent or incomplete molecular data."""


def element_symbol(z: int) -> str:
    return ELEMENTS[z] if 0 < z < len(ELEMENTS) else str(z)


def parse_element(token: str) -> int:
    """Map an element symbol (case-insensitive) or a numeric Z to Z."""
    token = token.strip()
    try:
        return int(token)
    except ValueError:
        pass
    try:
        z = float(token)
    except ValueError:
        z = None
    if z is not None:
        if z != int(z):
            raise DataError(f"non-integer atomic number {token!r}")
        return int(z)
    try:
        return ATOMIC_NUMBERS[token.lower()]
    except KeyError:
        raise DataError(f"unknown element {token!r}") from None


@dataclass(frozen=True, eq=False)
class Molecule:
    """One molecular system: species, Cartesian coordinates and scalar targets."""

    id: str
    atomic_numbers: np.ndarray
    coordinates: np.ndarray
    properties: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        z = np.array(self.atomic_numbers, dtype=np.int64).reshape(-1)
        r = np.array(self.coordinates, dtype=np.float64)
        if r.ndim != 2 or r.shape[1] != 3:
            raise DataError(f"molecule {self.id!r}: coordinates must be N x 3")
        if len(z) == 0:
            raise DataError(f"molecule {self.id!r}: no atoms")
        if len(z) != len(r):
            raise DataError(
                f"molecule {self.id!r}: {len(z)} atomic numbers but {len(r)} coordinates"
            )
        if np.any(z < 1):
            raise DataError(f"molecule {self.id!r}: atomic numbers must be >= 1")
        if not np.all(np.isfinite(r)):
            raise DataError(f"molecule {self.id!r}: non-finite coordinates")
        if len(z) > 1:
            d = np.linalg.norm(r[:, None, :] - r[None, :, :], axis=-1)
            d[np.diag_indices_from(d)] = np.inf
            if d.min() < MIN_DISTANCE:
                i, j = np.unravel_index(np.argmin(d), d.shape)
                raise DataError(
                    f"molecule {self.id!r}: atoms {min(i, j)} and {max(i, j)} coincide"
                )
        z.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "atomic_numbers", z)
        object.__setattr__(self, "coordinates", r)
        object.__setattr__(
            self, "properties", {str(k): float(v) for k, v in self.properties.items()}
        )

    @property
    def n_atoms(self) -> int:
        return len(self.atomic_numbers)

    def __eq__(self, other):
        if not isinstance(other, Molecule):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.atomic_numbers, other.atomic_numbers)
            and np.array_equal(self.coordinates, other.coordinates)
            and self.properties == other.properties
        )

    __hash__ = None

    def target(self, name: str) -> float:
        try:
            return self.properties[name]
        except KeyError:
            raise DataError(f"molecule {self.id!r} has no property {name!r}") from None


@dataclass(frozen=True)
class Dataset:
    molecules: tuple[Molecule, ...]
    length_unit: str = "unspecified"
    source_name: str = "dataset"

    def __post_init__(self):
        object.__setattr__(self, "molecules", tuple(self.molecules))
        if self.length_unit not in LENGTH_UNITS:
            raise DataError(f"unknown length unit {self.length_unit!r}")
        seen = set()
        for mol in self.molecules:
            if mol.id in seen:
                raise DataError(f"duplicate molecule id {mol.id!r}")
            seen.add(mol.id)

    def __len__(self):
        return len(self.molecules)

    def __iter__(self):
        return iter(self.molecules)

    def __getitem__(self, i):
        return self.molecules[i]

    @property
    def ids(self) -> list[str]:
        return [m.id for m in self.molecules]

    def select(self, indices: Iterable[int], source_name: str | None = None) -> "Dataset":
        return Dataset(
            tuple(self.molecules[i] for i in indices),
            self.length_unit,
            source_name or self.source_name,
        )

    def targets(self, name: str) -> np.ndarray:
        return np.array([m.target(name) for m in self.molecules], dtype=np.float64)


@dataclass(frozen=True)
class FoldAssignment:
    fold_count: int
    assignment: tuple[int, ...]
    seed: int

    def test_indices(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.assignment) if f == fold]

    def train_indices(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.assignment) if f != fold]


# ---------------------------------------------------------------------------
# parsing


def _float(token: str, where: str) -> float:
    try:
        # GDB9-style exports write exponents as "*^"
        return float(token.replace("*^", "e"))
    except ValueError:
        raise DataError(f"{where}: cannot parse number {token!r}") from None


def _parse_metadata(line: str, where: str) -> dict[str, str]:
    try:
        tokens = shlex.split(line)
    except ValueError as exc:
        raise DataError(f"{where}: bad metadata line ({exc})") from None
    meta = {}
    for tok in tokens:
        if "=" not in tok:
            raise DataError(f"{where}: metadata token {tok!r} is not key=value")
        key, value = tok.split("=", 1)
        meta[key] = value
    return meta


def _read_extxyz(path: Path) -> Dataset:
    lines = path.read_text().splitlines()
    molecules = []
    units = set()
    pos = 0
    record = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        where = f"{path.name}: record {record} (line {pos + 1})"
        try:
            n = int(lines[pos].strip())
        except ValueError:
            raise DataError(f"{where}: expected atom count, got {lines[pos]!r}") from None
        if n < 1:
            raise DataError(f"{where}: atom count must be positive")
        if pos + 1 >= len(lines):
            raise DataError(f"{where}: missing metadata line")
        meta = _parse_metadata(lines[pos + 1], where)
        if "id" not in meta:
            raise DataError(f"{where}: metadata has no id=")
        body = lines[pos + 2 : pos + 2 + n]
        if len(body) < n or any(not b.strip() for b in body):
            raise DataError(
                f"{where}: molecule {meta['id']!r} declares {n} atoms "
                f"but fewer atom lines are present"
            )
        z, r = [], []
        for k, atom_line in enumerate(body):
            parts = atom_line.split()
            if len(parts) < 4:
                raise DataError(f"{where}: atom line {k} has fewer than 4 fields")
            z.append(parse_element(parts[0]))
            r.append([_float(p, where) for p in parts[1:4]])
        after = pos + 2 + n
        if after < len(lines) and lines[after].strip():
            # next non-blank line must be a count line; anything else means
            # the declared count was too small
            try:
                int(lines[after].strip())
            except ValueError:
                raise DataError(
                    f"{where}: molecule {meta['id']!r} has more atom lines than "
                    f"its declared count {n}"
                ) from None
        props = {}
        for key, value in meta.items():
            if key.lower() in _RESERVED_KEYS:
                continue
            try:
                props[key] = float(value.replace("*^", "e"))
            except ValueError:
                log.debug("%s: ignoring non-numeric metadata %s", where, key)
        if "unit" in meta:
            units.add(meta["unit"].lower())
        try:
            molecules.append(Molecule(meta["id"], z, r, props))
        except DataError as exc:
            raise DataError(f"{where}: {exc}") from None
        pos = after
        record += 1
    return _assemble(molecules, units, path)


def _read_csv_xyz(path: Path) -> Dataset:
    molecules = []
    units = set()
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if "id" not in fields or "n_atoms" not in fields:
            raise DataError(f"{path.name}: header must contain id and n_atoms")
        atom_cols = {
            c for c in fields
            if c.split("_")[0] in {"z", "x", "y"} and c.split("_")[-1].isdigit()
            or (c.startswith("z_") and c.endswith("_coord"))
        }
        prop_cols = [c for c in fields if c not in atom_cols | {"id", "n_atoms", "unit"}]
        for row_no, row in enumerate(reader):
            where = f"{path.name}: record {row_no} (line {row_no + 2})"
            try:
                n = int(row["n_atoms"])
            except (TypeError, ValueError):
                raise DataError(f"{where}: bad n_atoms {row.get('n_atoms')!r}") from None
            z, r = [], []
            for i in range(1, n + 1):
                keys = (f"z_{i}", f"x_{i}", f"y_{i}", f"z_{i}_coord")
                vals = [row.get(k) for k in keys]
                if any(v is None or v == "" for v in vals):
                    raise DataError(
                        f"{where}: molecule {row['id']!r} declares {n} atoms but "
                        f"atom {i} is incomplete"
                    )
                z.append(parse_element(vals[0]))
                r.append([_float(v, where) for v in vals[1:]])
            extra = f"z_{n + 1}"
            if row.get(extra) not in (None, ""):
                raise DataError(
                    f"{where}: molecule {row['id']!r} has more atoms than n_atoms={n}"
                )
            props = {c: _float(row[c], where) for c in prop_cols if row.get(c) not in (None, "")}
            if row.get("unit"):
                units.add(row["unit"].lower())
            try:
                molecules.append(Molecule(row["id"], z, r, props))
            except DataError as exc:
                raise DataError(f"{where}: {exc}") from None
    return _assemble(molecules, units, path)


def _assemble(molecules, units, path: Path) -> Dataset:
    if len(units) > 1:
        raise DataError(f"{path.name}: mixed length units {sorted(units)}")
    unit = units.pop() if units else "unspecified"
    return Dataset(tuple(molecules), unit, path.stem)


def parse_dataset(path, format: str = "extxyz") -> Dataset:
    """Read a dataset file, validating every molecule.

    Parameters
    ----------
    path : str or Path
        File to read.
    format : {"extxyz", "csv_xyz"}
        On-disk layout.

    Raises
    ------
    DataError
        On malformed records (the record index is part of the message),
        duplicate ids, atom count mismatches and coincident atoms.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file {str(path)!r} does not exist")
    if format == "extxyz":
        return _read_extxyz(path)
    if format == "csv_xyz":
        return _read_csv_xyz(path)
    raise DataError(f"unknown dataset format {format!r}")


def write_dataset(d: Dataset, path, format: str = "extxyz") -> None:
    """Serialize a dataset; floats are written with ``repr`` so they round-trip."""
    path = Path(path)
    if format == "extxyz":
        out = []
        for mol in d:
            meta = [f"id={shlex.quote(mol.id)}"]
            meta += [f"{k}={v!r}" for k, v in mol.properties.items()]
            if d.length_unit != "unspecified":
                meta.append(f"unit={d.length_unit}")
            out.append(str(mol.n_atoms))
            out.append(" ".join(meta))
            for z, (x, y, zc) in zip(mol.atomic_numbers.tolist(), mol.coordinates.tolist()):
                out.append(f"{element_symbol(z)} {x!r} {y!r} {zc!r}")
        path.write_text("\n".join(out) + "\n")
    elif format == "csv_xyz":
        n_max = max((m.n_atoms for m in d), default=0)
        props = sorted({k for m in d for k in m.properties})
        header = ["id", "n_atoms"]
        for i in range(1, n_max + 1):
            header += [f"z_{i}", f"x_{i}", f"y_{i}", f"z_{i}_coord"]
        header += props
        if d.length_unit != "unspecified":
            header.append("unit")
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for mol in d:
                row = [mol.id, mol.n_atoms]
                for i in range(n_max):
                    if i < mol.n_atoms:
                        x, y, zc = mol.coordinates[i].tolist()
                        row += [int(mol.atomic_numbers[i]), repr(x), repr(y), repr(zc)]
                    else:
                        row += ["", "", "", ""]
                row += [repr(mol.properties[p]) if p in mol.properties else "" for p in props]
                if d.length_unit != "unspecified":
                    row.append(d.length_unit)
                w.writerow(row)
    else:
        raise DataError(f"unknown dataset format {format!r}")


# ---------------------------------------------------------------------------
# subsets and folds


def heavy_atom_count(m: Molecule) -> int:
    """Number of non-hydrogen atoms."""
    return int(np.count_nonzero(m.atomic_numbers >= 2))


def heavy_atom_histogram(d: Dataset) -> dict[int, int]:
    counts: dict[int, int] = {}
    for mol in d:
        n = heavy_atom_count(mol)
        counts[n] = counts.get(n, 0) + 1
    return dict(sorted(counts.items()))


def subset_by_max_heavy_atoms(d: Dataset, n: int) -> Dataset:
    if n < 1:
        raise ValueError("heavy-atom bound must be >= 1")
    keep = [i for i, m in enumerate(d) if heavy_atom_count(m) <= n]
    return d.select(keep, f"{d.source_name}_{n}")


def transferability_split(d: Dataset, n: int) -> tuple[Dataset, Dataset]:
    """Split into molecules with at most ``n`` heavy atoms and the rest.

    A split with an empty side is returned as-is with a warning; callers
    decide whether that is fatal.
    """
    train = subset_by_max_heavy_atoms(d, n)
    test = d.select(
        [i for i, m in enumerate(d) if heavy_atom_count(m) > n],
        f"{d.source_name}_gt{n}",
    )
    if len(train) == 0 or len(test) == 0:
        log.warning(
            "degenerate transferability split at n=%d: %d train / %d test",
            n, len(train), len(test),
        )
    return train, test


def make_folds(d: Dataset | Sequence, k: int, seed: int = 0) -> FoldAssignment:
    """Seeded shuffle followed by round-robin assignment to ``k`` folds."""
    size = len(d)
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > size:
        raise ValueError(f"cannot make {k} folds from {size} molecules")
    order = np.random.default_rng(np.uint64(seed % 2**64)).permutation(size)
    assignment = [0] * size
    for rank, idx in enumerate(order):
        assignment[idx] = rank % k
    return FoldAssignment(k, tuple(assignment), seed)
