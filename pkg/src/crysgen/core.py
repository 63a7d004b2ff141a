"""Geometry of periodic crystals: lattices, fractional coordinates, torus arithmetic."""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import numpy as np

DEGENERATE_VOLUME_EPS = 1e-8


class DegenerateCellError(ValueError):
    """Raised when a lattice has (near-)zero volume."""


@dataclass(frozen=True)
class Lattice:
    """Three lattice vectors as rows of a 3x3 matrix, lengths in Angstrom."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.shape != (3, 3):
            raise ValueError(f"lattice must be 3x3, got {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("lattice entries must be finite")
        rows = rows.copy()
        rows.flags.writeable = False
        object.__setattr__(self, "rows", rows)

    @property
    def volume(self) -> float:
        return cell_volume(self)

    def invariants(self) -> tuple[float, float, float, float, float, float]:
        return lattice_invariants(self)


@dataclass(frozen=True)
class Crystal:
    """A periodic crystal: lattice, species sequence, fractional coordinates in [0,1).

    Coordinates are wrapped onto the torus at construction so every downstream
    consumer can assume the [0,1) chart.
    """

    lattice: Lattice
    species: tuple[str, ...]
    frac_coords: np.ndarray

    def __post_init__(self):
        species = tuple(self.species)
        coords = np.asarray(self.frac_coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"frac_coords must be Nx3, got {coords.shape}")
        if len(species) != coords.shape[0]:
            raise ValueError(
                f"{len(species)} species but {coords.shape[0]} coordinate rows"
            )
        coords = wrap_frac(coords)
        coords.flags.writeable = False
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "frac_coords", coords)

    @property
    def num_atoms(self) -> int:
        return len(self.species)

    def composition(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for s in self.species:
            counts[s] = counts.get(s, 0) + 1
        return counts


def wrap_frac(x):
    """Wrap fractional coordinates onto [0,1) componentwise."""
    x = np.asarray(x, dtype=float)
    wrapped = x - np.floor(x)
    # floor(x) can leave exactly 1.0 behind for tiny negative x
    return np.where(wrapped >= 1.0, wrapped - 1.0, wrapped)


def min_image_delta(src, dst):
    """Shortest signed torus displacement d with wrap(src + d) = dst.

    Componentwise, d lies in (-0.5, 0.5]; a tie at distance 0.5 resolves to +0.5.
    """
    d = wrap_frac(np.asarray(dst, dtype=float) - np.asarray(src, dtype=float))
    return np.where(d > 0.5, d - 1.0, d)


def cell_volume(lattice: Lattice) -> float:
    """Unsigned cell volume in cubic Angstrom; raises on a degenerate cell."""
    vol = abs(float(np.linalg.det(lattice.rows)))
    if vol < DEGENERATE_VOLUME_EPS:
        raise DegenerateCellError(f"cell volume {vol:g} below {DEGENERATE_VOLUME_EPS:g}")
    return vol


def lattice_invariants(lattice: Lattice) -> tuple[float, float, float, float, float, float]:
    """Rotation-invariant cell parameters (a, b, c, alpha, beta, gamma).

    Lengths in Angstrom, angles in degrees. alpha is the angle between rows b
    and c, beta between a and c, gamma between a and b.
    """
    cell_volume(lattice)  # degenerate check
    rows = lattice.rows
    a, b, c = (float(np.linalg.norm(rows[i])) for i in range(3))

    def angle(i, j):
        cosang = rows[i] @ rows[j] / (np.linalg.norm(rows[i]) * np.linalg.norm(rows[j]))
        return float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))

    return (a, b, c, angle(1, 2), angle(0, 2), angle(0, 1))


def frac_to_cart(crystal: Crystal) -> np.ndarray:
    """Cartesian coordinates X L^T for every atom, in Angstrom."""
    return crystal.frac_coords @ crystal.lattice.rows


def cart_to_frac(lattice: Lattice, cart: np.ndarray) -> np.ndarray:
    """Inverse of frac_to_cart; result wrapped to [0,1)."""
    cell_volume(lattice)
    return wrap_frac(np.asarray(cart, dtype=float) @ np.linalg.inv(lattice.rows))


def pairwise_min_image_distances(crystal: Crystal) -> np.ndarray:
    """Cartesian minimum-image distance matrix (NxN, zero diagonal)."""
    x = crystal.frac_coords
    d_frac = min_image_delta(x[:, None, :], x[None, :, :])
    d_cart = d_frac @ crystal.lattice.rows
    return np.linalg.norm(d_cart, axis=-1)


@dataclass(frozen=True)
class ElementTable:
    """Element symbol -> (atomic number, atomic mass, allowed oxidation states)."""

    atomic_numbers: dict[str, int]
    masses: dict[str, float]
    oxidation_states: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self.atomic_numbers

    def atomic_number(self, symbol: str) -> int:
        self._check(symbol)
        return self.atomic_numbers[symbol]

    def mass(self, symbol: str) -> float:
        self._check(symbol)
        return self.masses[symbol]

    def states(self, symbol: str) -> tuple[int, ...]:
        self._check(symbol)
        return self.oxidation_states[symbol]

    def _check(self, symbol: str):
        if symbol not in self.atomic_numbers:
            raise UnknownElementError(f"unknown element symbol {symbol!r}")


class UnknownElementError(KeyError):
    pass


def load_element_table(path=None) -> ElementTable:
    """Load the element table from a whitespace table.

    Each line: symbol, atomic number, mass, then one or more allowed integer
    oxidation states. Defaults to the packaged table.
    """
    if path is None:
        text = (
            importlib.resources.files("crysgen.data")
            .joinpath("oxidation_states.txt")
            .read_text()
        )
    else:
        with open(path) as fh:
            text = fh.read()
    numbers: dict[str, int] = {}
    masses: dict[str, float] = {}
    states: dict[str, tuple[int, ...]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 4:
            raise ValueError(f"element table line {lineno}: expected >= 4 fields")
        sym = parts[0]
        numbers[sym] = int(parts[1])
        masses[sym] = float(parts[2])
        st = tuple(sorted(int(p) for p in parts[3:]))
        if not st:
            raise ValueError(f"element table line {lineno}: no oxidation states")
        states[sym] = st
    return ElementTable(numbers, masses, states)
