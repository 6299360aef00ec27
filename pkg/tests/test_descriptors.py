import itertools
import math

import numpy as np
import pytest

from lcgap.data import Dataset, DataError
from lcgap.descriptors import (
    DescriptorConfig,
    OccupancyError,
    auto_max_occupancy,
    compute_descriptor,
    decaying_matrix,
    descriptor_length,
    extract_neighborhood,
    global_coulomb_matrix,
    localized_matrix,
    molecule_descriptors,
    pack_upper_triangle,
    permute_by_row_norm,
    reduced_descriptor,
    write_descriptor_dump,
)
from lcgap.synthetic import random_molecule

from conftest import mol

C_DIAGONAL = 36.8581051994259473318310724139  # 0.5 * 6**2.4 at 30 digits (mpmath)


def cfg(kind="localized", alpha=1.0, r_cut=10.0, m=2):
    return DescriptorConfig(kind, alpha, r_cut, m)


def oracle_matrix(z, r, alpha, decaying):
    """Entry-by-entry evaluation with plain Python floats."""
    k = len(z)
    dist = lambda a, b: math.sqrt(sum((a[i] - b[i]) ** 2 for i in range(3)))
    M = [[0.0] * k for _ in range(k)]
    for j in range(k):
        for l in range(k):
            if decaying:
                if j == l == 0:
                    M[j][l] = 0.5 * z[0] ** 2.4
                else:
                    den = dist(r[0], r[j]) + dist(r[0], r[l]) + dist(r[j], r[l])
                    M[j][l] = z[j] * z[l] / den**alpha
            elif j == l:
                M[j][l] = 0.5 * z[j] ** 2.4
            else:
                M[j][l] = z[j] * z[l] / dist(r[j], r[l]) ** alpha
    return np.array(M)


H2_UNIT = mol([1, 1], [[0, 0, 0], [0, 0, 1.0]])


# --- neighborhoods -----------------------------------------------------------


def test_single_atom_neighborhood():
    nb = extract_neighborhood(mol([6], [[1, 2, 3]]), 0, cfg(r_cut=100.0, m=3))
    assert nb.occupancy == 1
    assert nb.padded_size == 3


def test_collinear_neighborhood():
    m3 = mol([1, 6, 8], [[0, 0, 0], [2, 0, 0], [4, 0, 0]])
    nb = extract_neighborhood(m3, 1, cfg(r_cut=3.0, m=3))
    assert nb.occupancy == 3
    assert nb.members[0][0] == 6
    assert extract_neighborhood(m3, 1, cfg(r_cut=1.5, m=3)).occupancy == 1


def test_neighbor_order_and_ties():
    m4 = mol([1, 1, 1, 1], [[0, 0, 0], [0, 0, 2], [1, 0, 0], [0, 1, 0]])
    nb = extract_neighborhood(m4, 0, cfg(r_cut=5, m=4))
    # atoms 2 and 3 tie at distance 1 -> original index order, then atom 1
    np.testing.assert_array_equal(nb.coordinates[1:], [[1, 0, 0], [0, 1, 0], [0, 0, 2]])


def test_cutoff_is_closed():
    m2 = mol([1, 1], [[0, 0, 0], [0, 0, 2.0]])
    assert extract_neighborhood(m2, 0, cfg(r_cut=2.0, m=2)).occupancy == 2


def test_occupancy_overflow():
    m3 = mol([1, 6, 8], [[0, 0, 0], [2, 0, 0], [4, 0, 0]], "tri")
    with pytest.raises(OccupancyError, match="'tri', atom 1"):
        extract_neighborhood(m3, 1, cfg(r_cut=3.0, m=2))


# --- matrices ------------------------------------------------------------------


def test_localized_examples():
    np.testing.assert_array_equal(localized_matrix(extract_neighborhood(H2_UNIT, 0, cfg()), cfg()),
                                  [[0.5, 1.0], [1.0, 0.5]])
    far = mol([1, 1], [[0, 0, 0], [0, 0, 2.0]])
    c3 = cfg(alpha=3.0)
    assert localized_matrix(extract_neighborhood(far, 0, c3), c3)[0, 1] == 0.125
    c = cfg(m=1)
    carbon = localized_matrix(extract_neighborhood(mol([6], [[0, 0, 0]]), 0, c), c)
    assert carbon[0, 0] == pytest.approx(C_DIAGONAL, rel=1e-15)


def test_decaying_examples():
    c1 = cfg("decaying")
    np.testing.assert_array_equal(decaying_matrix(extract_neighborhood(H2_UNIT, 0, c1), c1),
                                  [[0.5, 0.5], [0.5, 0.5]])
    c3 = cfg("decaying", alpha=3.0)
    M = decaying_matrix(extract_neighborhood(H2_UNIT, 0, c3), c3)
    assert M[0, 1] == M[1, 0] == M[1, 1] == 0.125
    line = mol([1, 1, 1], [[0, 0, 0], [-1, 0, 0], [1, 0, 0]])
    c = cfg("decaying", m=3)
    assert decaying_matrix(extract_neighborhood(line, 0, c), c)[1, 2] == 0.25


def test_dummy_rows_are_zero():
    c = cfg("localized", m=5)
    M = localized_matrix(extract_neighborhood(H2_UNIT, 0, c), c)
    assert np.all(M[2:] == 0) and np.all(M[:, 2:] == 0)
    c = cfg("decaying", m=5)
    M = decaying_matrix(extract_neighborhood(H2_UNIT, 0, c), c)
    assert np.all(M[2:] == 0) and np.all(M[:, 2:] == 0)


@pytest.mark.parametrize("kind", ["localized", "decaying"])
def test_matrices_match_scalar_oracle(rng, kind):
    for trial in range(20):
        m = random_molecule(rng, int(rng.integers(2, 9)))
        alpha = float(rng.uniform(1, 7))
        c = DescriptorConfig(kind, alpha, 100.0, m.n_atoms + 2)
        for i in range(m.n_atoms):
            nb = extract_neighborhood(m, i, c)
            got = (localized_matrix if kind == "localized" else decaying_matrix)(nb, c)
            want = oracle_matrix(nb.atomic_numbers.tolist(), nb.coordinates.tolist(), alpha,
                                 kind == "decaying")
            np.testing.assert_allclose(got[: nb.occupancy, : nb.occupancy], want, rtol=1e-13)


def test_global_coulomb():
    assert global_coulomb_matrix(mol([1], [[0, 0, 0]])).tolist() == [[0.5]]
    assert global_coulomb_matrix(H2_UNIT)[0, 1] == 1.0


def test_global_matches_scalar_oracle_and_is_symmetric(rng):
    for _ in range(10):
        m = random_molecule(rng, 6)
        G = global_coulomb_matrix(m)
        np.testing.assert_array_equal(G, G.T)
        assert np.all(np.diag(G) > 0)
        want = oracle_matrix(m.atomic_numbers.tolist(), m.coordinates.tolist(), 1.0, False)
        np.testing.assert_allclose(G, want, rtol=1e-14)


def test_localized_reduces_to_global(rng):
    for _ in range(10):
        m = random_molecule(rng, 4)
        c = DescriptorConfig("localized", 1.0, 1e3, 4)
        for i in range(4):
            nb = extract_neighborhood(m, i, c)
            order = [i] + [int(np.flatnonzero((m.coordinates == x).all(axis=1))[0])
                           for x in nb.coordinates[1:]]
            G = global_coulomb_matrix(m)[np.ix_(order, order)]
            np.testing.assert_allclose(localized_matrix(nb, c), G, rtol=1e-14)


# --- permutation, packing, reduced ------------------------------------------


def test_permute_examples():
    M = np.diag([9.0, 5.0, 2.0])
    P, perm = permute_by_row_norm(M)
    assert perm.tolist() == [0, 1, 2]
    M = np.diag([9.0, 2.0, 5.0])
    P, perm = permute_by_row_norm(M)
    assert perm.tolist() == [0, 2, 1]
    np.testing.assert_array_equal(P, np.diag([9.0, 5.0, 2.0]))
    M = np.zeros((4, 4))
    M[0, 0], M[3, 3] = 1.0, 0.5
    assert permute_by_row_norm(M)[1].tolist() == [0, 3, 1, 2]


def test_permute_ties_are_stable():
    assert permute_by_row_norm(np.diag([1.0, 3.0, 3.0, 3.0]))[1].tolist() == [0, 1, 2, 3]


def test_permute_norms_non_increasing(rng):
    for _ in range(50):
        A = rng.normal(size=(7, 7))
        P, perm = permute_by_row_norm(A + A.T)
        norms = np.linalg.norm(P, axis=1)
        assert np.all(np.diff(norms[1:]) <= 0)
        assert perm[0] == 0


def test_pack():
    assert pack_upper_triangle(np.array([[1.0, 2.0], [2.0, 3.0]])).tolist() == [1.0, 2.0, 3.0]
    assert pack_upper_triangle(np.array([[4.0]])).tolist() == [4.0]
    assert len(pack_upper_triangle(np.eye(20))) == 210
    with pytest.raises(ValueError):
        pack_upper_triangle(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_reduced_examples():
    c = cfg("reduced")
    r = reduced_descriptor(extract_neighborhood(H2_UNIT, 0, c), c)
    assert r.values.tolist() == [0.5, 0.5, 0.5]
    c = cfg("reduced", m=3)
    r = compute_descriptor(mol([6], [[0, 0, 0]]), 0, c)
    assert r.values.tolist() == [0.5 * 6**2.4, 0, 0, 0, 0]


def test_compute_descriptor_localized_h2():
    assert compute_descriptor(H2_UNIT, 0, cfg()).values.tolist() == [0.5, 1.0, 0.5]


@pytest.mark.parametrize("m", range(1, 31))
def test_lengths(m):
    assert descriptor_length("localized", m) == m * (m + 1) // 2
    assert descriptor_length("reduced", m) == 2 * m - 1
    atom = mol([8], [[0, 0, 0]])
    for kind in ("localized", "decaying"):
        assert compute_descriptor(atom, 0, DescriptorConfig(kind, 3, 5, m)).d == m * (m + 1) // 2
    assert compute_descriptor(atom, 0, DescriptorConfig("reduced", 3, 5, m)).d == 2 * m - 1


def test_global_reference_kind_fixes_alpha():
    c = DescriptorConfig("global_reference", alpha=4.0)
    assert c.alpha == 1.0
    with pytest.raises(ValueError):
        compute_descriptor(H2_UNIT, 0, c)


def test_config_validation():
    for bad in [dict(alpha=0), dict(r_cut=-1), dict(max_occupancy=0), dict(kind="sorted")]:
        with pytest.raises(ValueError):
            DescriptorConfig(**bad)


# --- invariances -------------------------------------------------------------

KINDS = ["localized", "decaying", "reduced"]


@pytest.mark.parametrize("kind", KINDS)
def test_index_permutation_brute_force(rng, kind):
    """Every one of the 120 orderings of a 5-atom molecule gives the same descriptors."""
    m = random_molecule(rng, 5)
    c = DescriptorConfig(kind, 3.0, 100.0, 6)
    base = molecule_descriptors(m, c)
    for perm in itertools.permutations(range(5)):
        p = list(perm)
        shuffled = mol(m.atomic_numbers[p], m.coordinates[p])
        got = molecule_descriptors(shuffled, c)
        np.testing.assert_allclose(got, base[p], rtol=1e-12, atol=0)


@pytest.mark.parametrize("kind", KINDS)
def test_translation_and_rotation(rng, kind):
    m = random_molecule(rng, 8)
    c = DescriptorConfig(kind, 4.0, 3.0, 10)
    base = molecule_descriptors(m, c)
    moved = mol(m.atomic_numbers, m.coordinates + rng.normal(scale=10, size=3))
    np.testing.assert_allclose(molecule_descriptors(moved, c), base, rtol=1e-12, atol=1e-300)
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    rotated = mol(m.atomic_numbers, m.coordinates @ Q.T)
    np.testing.assert_allclose(molecule_descriptors(rotated, c), base, rtol=1e-10, atol=1e-300)


@pytest.mark.parametrize("kind", KINDS)
def test_padding_only_adds_zeros(rng, kind):
    m = random_molecule(rng, 7)
    small = molecule_descriptors(m, DescriptorConfig(kind, 3.0, 3.5, 8))
    big = molecule_descriptors(m, DescriptorConfig(kind, 3.0, 3.5, 12))
    for a, b in zip(small, big):
        assert sorted(a[a != 0]) == sorted(b[b != 0])


def test_decaying_cutoff_continuity():
    """An atom crossing r_cut changes no entry by more than Z_max**2 / (2 r_cut)**alpha."""
    r_cut, alpha = 7.0, 5.0
    bound = 17**2 / (2 * r_cut) ** alpha
    assert bound == pytest.approx(5.37350508716606e-4, rel=1e-12)
    core = [[0, 0, 0], [1.1, 0, 0], [0, 1.2, 0]]
    for eps in [1e-9, 1e-6, 1e-3]:
        # the atom sits eps inside, so its entries can exceed the boundary value by (1 + eps/r)**alpha
        at_atom = 17**2 / (2 * (r_cut - eps)) ** alpha
        inside = mol([17, 6, 1, 17], core + [[0, 0, r_cut - eps]])
        outside = mol([17, 6, 1, 17], core + [[0, 0, r_cut + eps]])
        c = DescriptorConfig("reduced", alpha, r_cut, 5)
        jump = np.abs(compute_descriptor(inside, 0, c).values
                      - compute_descriptor(outside, 0, c).values).max()
        assert 0 < jump <= at_atom
        assert jump <= bound * (1 + 1e-3)
        cd = DescriptorConfig("decaying", alpha, r_cut, 5)
        Mi = decaying_matrix(extract_neighborhood(inside, 0, cd), cd)
        Mo = decaying_matrix(extract_neighborhood(outside, 0, cd), cd)
        assert np.abs(Mi - Mo).max() <= at_atom
        # localized descriptor has no such guarantee
        cl = DescriptorConfig("localized", alpha, r_cut, 5)
        Li = localized_matrix(extract_neighborhood(inside, 0, cl), cl)
        Lo = localized_matrix(extract_neighborhood(outside, 0, cl), cl)
        assert np.abs(Li - Lo).max() > bound


def test_auto_max_occupancy():
    c = cfg(r_cut=3.0)
    assert auto_max_occupancy(Dataset((mol([1], [[0, 0, 0]]),)), c) == 3
    assert auto_max_occupancy(Dataset((H2_UNIT,)), c) == 4
    cluster = mol([6] * 5, np.eye(5, 3) + 0.1 * np.arange(5)[:, None])
    assert auto_max_occupancy(Dataset((cluster,)), c, headroom=0) == 5


def test_min_distance_guard():
    with pytest.raises(DataError):
        mol([1, 1], [[0, 0, 0], [0, 0, 1e-7]])


def test_descriptor_dump(tmp_path):
    d = Dataset((H2_UNIT,))
    p = tmp_path / "dump.csv"
    write_descriptor_dump(p, d, cfg())
    lines = p.read_text().splitlines()
    assert lines[0] == "molecule_id,atom_index,kind,alpha,r_cut,m,v_0,v_1,v_2"
    assert lines[1] == "m,0,localized,1.0,10.0,2,0.5,1.0,0.5"
