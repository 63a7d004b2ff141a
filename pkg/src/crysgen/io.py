"""Dataset and CIF-subset I/O.

Canonical storage is a line-oriented JSON record format: a header line with
{"schema_version", "property_names"}, then one record per line. CIF is an
import/export adapter only (P1, no symmetry expansion).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import Crystal, ElementTable, Lattice, lattice_invariants

SCHEMA_VERSION = 1
COORD_FMT = "%.12g"  # 12 significant digits


class DatasetFormatError(ValueError):
    pass


class CifParseError(ValueError):
    pass


@dataclass(frozen=True)
class CrystalRecord:
    identifier: str
    crystal: Crystal
    properties: dict[str, float] = field(default_factory=dict)


def save_dataset(path, records, property_names=None):
    """Write records as header + one JSON object per line."""
    if property_names is None:
        names = set()
        for rec in records:
            names.update(rec.properties)
        property_names = sorted(names)
    with open(path, "w") as fh:
        fh.write(
            json.dumps(
                {"schema_version": SCHEMA_VERSION, "property_names": list(property_names)}
            )
            + "\n"
        )
        for rec in records:
            obj = {
                "id": rec.identifier,
                "lattice": [[float(v) for v in row] for row in rec.crystal.lattice.rows],
                "species": list(rec.crystal.species),
                "frac_coords": [
                    [float(COORD_FMT % v) for v in row] for row in rec.crystal.frac_coords
                ],
            }
            if rec.properties:
                obj["properties"] = {k: float(v) for k, v in rec.properties.items()}
            fh.write(json.dumps(obj) + "\n")


def load_dataset(path, table: ElementTable | None = None) -> list[CrystalRecord]:
    """Load records; species are validated against the element table when given."""
    records: list[CrystalRecord] = []
    seen: set[str] = set()
    with open(path) as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise DatasetFormatError(f"{path}: empty dataset file")
        try:
            header = json.loads(header_line)
            property_names = set(header["property_names"])
            header["schema_version"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetFormatError(f"{path}: bad header line: {exc}") from exc
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                identifier = obj["id"]
                lattice = Lattice(np.array(obj["lattice"], dtype=float))
                species = obj["species"]
                coords = np.array(obj["frac_coords"], dtype=float)
                props = {k: float(v) for k, v in obj.get("properties", {}).items()}
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if not identifier or identifier in seen:
                raise DatasetFormatError(
                    f"{path}:{lineno}: missing or duplicate identifier {identifier!r}"
                )
            seen.add(identifier)
            unknown_props = set(props) - property_names
            if unknown_props:
                raise DatasetFormatError(
                    f"{path}:{lineno}: properties {sorted(unknown_props)} not in header"
                )
            if table is not None:
                for sym in species:
                    if sym not in table:
                        raise DatasetFormatError(
                            f"{path}:{lineno}: unknown element symbol {sym!r}"
                        )
            records.append(CrystalRecord(identifier, Crystal(lattice, species, coords), props))
    return records


def emit_cif(crystal: Crystal, name: str = "crysgen") -> str:
    """Serialize a crystal as a minimal P1 CIF."""
    a, b, c, alpha, beta, gamma = lattice_invariants(crystal.lattice)
    lines = [
        f"data_{name}",
        "_symmetry_space_group_name_H-M   'P 1'",
        "_symmetry_Int_Tables_number      1",
        f"_cell_length_a     {COORD_FMT % a}",
        f"_cell_length_b     {COORD_FMT % b}",
        f"_cell_length_c     {COORD_FMT % c}",
        f"_cell_angle_alpha  {COORD_FMT % alpha}",
        f"_cell_angle_beta   {COORD_FMT % beta}",
        f"_cell_angle_gamma  {COORD_FMT % gamma}",
        "loop_",
        "_atom_site_label",
        "_atom_site_type_symbol",
        "_atom_site_fract_x",
        "_atom_site_fract_y",
        "_atom_site_fract_z",
    ]
    for i, (sym, xyz) in enumerate(zip(crystal.species, crystal.frac_coords)):
        coords = "  ".join(COORD_FMT % v for v in xyz)
        lines.append(f"{sym}{i}  {sym}  {coords}")
    return "\n".join(lines) + "\n"


_CELL_KEYS = (
    "_cell_length_a",
    "_cell_length_b",
    "_cell_length_c",
    "_cell_angle_alpha",
    "_cell_angle_beta",
    "_cell_angle_gamma",
)


def parse_cif(text: str) -> Crystal:
    """Parse the CIF subset written by emit_cif (P1 cell + atom-site loop)."""
    cell: dict[str, float] = {}
    lines = text.splitlines()
    i = 0
    species: list[str] = []
    coords: list[list[float]] = []
    while i < len(lines):
        line = lines[i].strip()
        parts = line.split()
        if parts and parts[0] in _CELL_KEYS:
            if len(parts) < 2:
                raise CifParseError(f"{parts[0]}: missing value")
            try:
                cell[parts[0]] = float(parts[1])
            except ValueError as exc:
                raise CifParseError(f"{parts[0]}: non-numeric value {parts[1]!r}") from exc
            i += 1
        elif line == "loop_":
            i += 1
            columns: list[str] = []
            while i < len(lines) and lines[i].strip().startswith("_"):
                columns.append(lines[i].strip())
                i += 1
            if "_atom_site_fract_x" not in columns:
                # some other loop; skip its body
                while i < len(lines) and lines[i].strip() and not lines[i].strip().startswith(("_", "loop_", "data_")):
                    i += 1
                continue
            try:
                sym_col = columns.index("_atom_site_type_symbol")
                xyz_cols = [columns.index(f"_atom_site_fract_{ax}") for ax in "xyz"]
            except ValueError as exc:
                raise CifParseError(f"atom-site loop missing column: {exc}") from exc
            while i < len(lines):
                row = lines[i].strip().split()
                if not row or row[0].startswith(("_", "loop_", "data_")):
                    break
                if len(row) < len(columns):
                    raise CifParseError(f"atom-site row has {len(row)} fields, need {len(columns)}")
                species.append(row[sym_col])
                try:
                    coords.append([float(row[c]) for c in xyz_cols])
                except ValueError as exc:
                    raise CifParseError(f"non-numeric coordinate: {exc}") from exc
                i += 1
        else:
            i += 1
    missing = [k for k in _CELL_KEYS if k not in cell]
    if missing:
        raise CifParseError(f"missing cell keys: {missing}")
    if not species:
        raise CifParseError("no atom-site loop found")
    lattice = lattice_from_parameters(*(cell[k] for k in _CELL_KEYS))
    return Crystal(lattice, species, np.array(coords))


def lattice_from_parameters(a, b, c, alpha, beta, gamma) -> Lattice:
    """Lower-triangular lattice from cell lengths (Angstrom) and angles (degrees)."""
    al, be, ga = np.radians([alpha, beta, gamma])
    cx = c * np.cos(be)
    cy = c * (np.cos(al) - np.cos(be) * np.cos(ga)) / np.sin(ga)
    cz_sq = c * c - cx * cx - cy * cy
    if cz_sq <= 0:
        raise CifParseError("inconsistent cell parameters (non-positive c_z^2)")
    rows = np.array(
        [
            [a, 0.0, 0.0],
            [b * np.cos(ga), b * np.sin(ga), 0.0],
            [cx, cy, np.sqrt(cz_sq)],
        ]
    )
    return Lattice(rows)
