import numpy as np
import pytest

from crysgen.core import Crystal, Lattice, load_element_table
from crysgen.io import CrystalRecord, lattice_from_parameters


@pytest.fixture(scope="session")
def table():
    return load_element_table()


@pytest.fixture
def cubic_nacl():
    lat = Lattice(4.0 * np.eye(3))
    return Crystal(lat, ("Na", "Cl"), np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]]))


@pytest.fixture
def triclinic_crystal():
    lat = lattice_from_parameters(4.1, 5.2, 6.3, 80.0, 95.0, 103.0)
    coords = np.array([[0.1, 0.2, 0.3], [0.4, 0.9, 0.6], [0.75, 0.05, 0.5]])
    return Crystal(lat, ("Fe", "O", "O"), coords)


def toy_records(n=6, seed=0, symbols=("Na", "Cl", "Fe", "O")):
    """Small random corpus of well-separated crystals for fitting smoke tests."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        a, b, c = rng.uniform(3.5, 7.5, size=3)
        lat = lattice_from_parameters(a, b, c, 90.0, 90.0, 90.0)
        n_atoms = int(rng.integers(1, 5))
        species = tuple(rng.choice(symbols, size=n_atoms))
        coords = rng.random((n_atoms, 3))
        props = {"band_gap": float(rng.uniform(0.0, 4.0))}
        records.append(CrystalRecord(f"toy-{i}", Crystal(lat, species, coords), props))
    return records


@pytest.fixture
def records():
    return toy_records()
