import numpy as np
import pytest

from lcgap.data import Dataset, Molecule
from lcgap.synthetic import random_dataset

H2_XYZ = """2
id=h2 atomization_energy=-104.2 unit=angstrom
H 0.0 0.0 0.0
H 0.0 0.0 0.74
"""


def mol(z, coords, mol_id="m", **props):
    return Molecule(mol_id, z, np.asarray(coords, dtype=float), props)


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


@pytest.fixture
def h2_file(tmp_path):
    p = tmp_path / "h2.xyz"
    p.write_text(H2_XYZ)
    return p


@pytest.fixture
def toy_dataset():
    return random_dataset(7, 12, n_atoms=(2, 6))


@pytest.fixture
def heavy_dataset():
    """Molecules with 0..3 heavy atoms: H2, CH4-like, C2H6-like, C3."""
    mols = [
        mol([1, 1], [[0, 0, 0], [0, 0, 0.74]], "h2", e=-100.0),
        mol([6, 1, 1, 1, 1], [[0, 0, 0], [1.09, 0, 0], [-1.09, 0, 0], [0, 1.09, 0], [0, -1.09, 0]],
            "ch4", e=-400.0),
        mol([6, 6, 1, 1], [[0, 0, 0], [1.5, 0, 0], [-1.0, 0, 0], [2.5, 0, 0]], "c2h2", e=-380.0),
        mol([6, 6, 8], [[0, 0, 0], [1.5, 0, 0], [3.0, 0, 0]], "c2o", e=-500.0),
        mol([8, 1, 1], [[0, 0, 0], [0.96, 0, 0], [-0.24, 0.93, 0]], "h2o", e=-220.0),
    ]
    return Dataset(tuple(mols), "angstrom", "toy")


# --- acceptance report -------------------------------------------------------
# Tests marked ``criterion("name")`` get one PASS/FAIL/SKIP line in the
# terminal summary, in definition order.

_CRITERIA: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        detail = ""
        if rep.outcome == "skipped" and isinstance(rep.longrepr, tuple):
            detail = rep.longrepr[2].removeprefix("Skipped: ")
        entry = _CRITERIA.setdefault(name, ["PASS", 0.0, []])
        if status == "FAIL" or (status == "SKIP" and entry[0] == "PASS"):
            entry[0] = status
        entry[1] += rep.duration
        if detail:
            entry[2].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, seconds, details) in _CRITERIA.items():
        note = f"  ({details[0]})" if details else ""
        terminalreporter.write_line(f"{status}  {name}  [{seconds:.2f} s]{note}")
