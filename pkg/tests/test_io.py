import json

import numpy as np
import pytest

from crysgen.core import Crystal, Lattice, lattice_invariants
from crysgen.io import (
    CifParseError,
    CrystalRecord,
    DatasetFormatError,
    emit_cif,
    lattice_from_parameters,
    load_dataset,
    parse_cif,
    save_dataset,
)
from tests.conftest import toy_records


# ---------------------------------------------------------------- dataset


def test_dataset_round_trip(tmp_path, table):
    records = toy_records(5, seed=3)
    path = tmp_path / "data.jsonl"
    save_dataset(path, records)
    loaded = load_dataset(path, table)
    assert len(loaded) == len(records)
    for orig, got in zip(records, loaded):
        assert got.identifier == orig.identifier
        assert got.crystal.species == orig.crystal.species
        np.testing.assert_allclose(got.crystal.lattice.rows, orig.crystal.lattice.rows)
        np.testing.assert_allclose(
            got.crystal.frac_coords, orig.crystal.frac_coords, atol=1e-11
        )
        assert got.properties == pytest.approx(orig.properties)


def test_dataset_header_line(tmp_path):
    records = toy_records(2)
    path = tmp_path / "data.jsonl"
    save_dataset(path, records)
    header = json.loads(path.read_text().splitlines()[0])
    assert header["schema_version"] == 1
    assert header["property_names"] == ["band_gap"]


def test_dataset_bad_header(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"not_the_header": true}\n')
    with pytest.raises(DatasetFormatError, match="header"):
        load_dataset(path)


def test_dataset_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(DatasetFormatError):
        load_dataset(path)


def test_dataset_malformed_record_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"schema_version": 1, "property_names": []}\n'
        '{"id": "a", "lattice": [[4,0,0],[0,4,0],[0,0,4]], "species": ["Fe"], "frac_coords": [[0,0,0]]}\n'
        "not json\n"
    )
    with pytest.raises(DatasetFormatError, match=":3"):
        load_dataset(path)


def test_dataset_duplicate_id(tmp_path):
    rec = toy_records(1)[0]
    path = tmp_path / "dup.jsonl"
    save_dataset(path, [rec, CrystalRecord(rec.identifier, rec.crystal)])
    with pytest.raises(DatasetFormatError, match="duplicate"):
        load_dataset(path)


def test_dataset_unknown_element(tmp_path, table):
    path = tmp_path / "unk.jsonl"
    path.write_text(
        '{"schema_version": 1, "property_names": []}\n'
        '{"id": "a", "lattice": [[4,0,0],[0,4,0],[0,0,4]], "species": ["Xx"], "frac_coords": [[0,0,0]]}\n'
    )
    with pytest.raises(DatasetFormatError, match="Xx"):
        load_dataset(path, table)


def test_dataset_property_not_in_header(tmp_path):
    path = tmp_path / "prop.jsonl"
    path.write_text(
        '{"schema_version": 1, "property_names": []}\n'
        '{"id": "a", "lattice": [[4,0,0],[0,4,0],[0,0,4]], "species": ["Fe"],'
        ' "frac_coords": [[0,0,0]], "properties": {"gap": 1.0}}\n'
    )
    with pytest.raises(DatasetFormatError, match="gap"):
        load_dataset(path)


# ---------------------------------------------------------------- CIF


def test_cif_round_trip(triclinic_crystal):
    text = emit_cif(triclinic_crystal, name="test")
    back = parse_cif(text)
    assert back.species == triclinic_crystal.species
    np.testing.assert_allclose(
        lattice_invariants(back.lattice),
        lattice_invariants(triclinic_crystal.lattice),
        atol=1e-8,
    )
    np.testing.assert_allclose(back.frac_coords, triclinic_crystal.frac_coords, atol=1e-10)


def test_cif_contains_required_tags(cubic_nacl):
    text = emit_cif(cubic_nacl)
    for tag in (
        "_cell_length_a",
        "_cell_length_b",
        "_cell_length_c",
        "_cell_angle_alpha",
        "_cell_angle_beta",
        "_cell_angle_gamma",
        "_atom_site_fract_x",
    ):
        assert tag in text


def test_cif_missing_cell_key():
    with pytest.raises(CifParseError, match="missing cell keys"):
        parse_cif("data_x\n_cell_length_a 4.0\n")


def test_cif_no_atoms(cubic_nacl):
    text = "\n".join(
        line for line in emit_cif(cubic_nacl).splitlines() if "Na0" not in line and "Cl1" not in line
    )
    with pytest.raises(CifParseError, match="atom-site"):
        parse_cif(text)


def test_cif_bad_coordinate(cubic_nacl):
    text = emit_cif(cubic_nacl).replace("0.5  0.5  0.5", "0.5  oops  0.5")
    with pytest.raises(CifParseError):
        parse_cif(text)


# --------------------------------------------------- lattice_from_parameters


def test_lattice_from_parameters_orthorhombic():
    lat = lattice_from_parameters(3.0, 4.0, 5.0, 90.0, 90.0, 90.0)
    np.testing.assert_allclose(lat.rows, np.diag([3.0, 4.0, 5.0]), atol=1e-12)


def test_lattice_from_parameters_is_lower_triangular_and_invariant():
    lat = lattice_from_parameters(4.1, 5.2, 6.3, 80.0, 95.0, 103.0)
    assert lat.rows[0, 1] == 0.0 and lat.rows[0, 2] == 0.0 and lat.rows[1, 2] == 0.0
    np.testing.assert_allclose(
        lattice_invariants(lat), (4.1, 5.2, 6.3, 80.0, 95.0, 103.0), atol=1e-10
    )


def test_lattice_from_parameters_inconsistent():
    with pytest.raises(CifParseError):
        lattice_from_parameters(1.0, 1.0, 1.0, 5.0, 170.0, 90.0)
