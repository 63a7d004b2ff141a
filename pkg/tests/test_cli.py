import json

import pytest
from click.testing import CliRunner

from crysgen.cli import EXIT_BUDGET, EXIT_CONFIG, EXIT_IO, main
from crysgen.io import save_dataset
from tests.conftest import toy_records


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, runner):
    d = tmp_path_factory.mktemp("cli")
    dataset = d / "corpus.jsonl"
    save_dataset(dataset, toy_records(6, seed=41))
    paths = {
        "dataset": str(dataset),
        "lattice": str(d / "lattice.json"),
        "atoms": str(d / "atoms.json"),
        "positions": str(d / "positions.json"),
        "disc": str(d / "disc.json"),
        "dir": d,
    }
    for args in (
        ["fit-lattice", paths["dataset"], "--out", paths["lattice"], "--k", "2"],
        ["train-atoms", paths["dataset"], "--out", paths["atoms"],
         "--epochs", "2", "--hidden", "16", "--layers", "1"],
        ["train-positions", paths["dataset"], "--out", paths["positions"],
         "--epochs", "2", "--hidden", "16", "--layers", "1", "--pairs-per-crystal", "2"],
        ["train-policy", paths["dataset"], "--out", paths["disc"],
         "--epochs", "2", "--hidden", "16", "--layers", "1"],
    ):
        result = runner.invoke(main, args)
        assert result.exit_code == 0, result.output
    return paths


def test_training_subcommands_emit_json(workspace):
    # workspace construction already ran them; verify artifacts exist
    for key in ("lattice", "atoms", "positions", "disc"):
        assert json.load(open(workspace[key]))


def test_fit_lattice_missing_dataset_exit_io(runner, tmp_path):
    result = runner.invoke(
        main, ["fit-lattice", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")]
    )
    assert result.exit_code == EXIT_IO


def test_sample_happy_path(runner, workspace):
    out = str(workspace["dir"] / "samples.jsonl")
    result = runner.invoke(
        main,
        [
            "sample",
            "--lattice-model", workspace["lattice"],
            "--atom-model", workspace["atoms"],
            "--position-model", workspace["positions"],
            "--tau", "0.9", "--top-p", "0.95", "--max-atoms", "4",
            "--num-steps", "3", "--seed", "7", "--n", "2",
            "--out", out,
        ],
    )
    assert result.exit_code == 0, result.output
    body = json.loads(result.output)
    assert body["n_samples"] == 2
    lines = open(out).read().splitlines()
    assert len(lines) == 3  # header + 2 records


def test_sample_missing_models_exit_config(runner, tmp_path):
    result = runner.invoke(main, ["sample", "--out", str(tmp_path / "x.jsonl")])
    assert result.exit_code == EXIT_CONFIG


def test_sample_bad_condition_exit_config(runner, workspace, tmp_path):
    result = runner.invoke(
        main,
        [
            "sample",
            "--lattice-model", workspace["lattice"],
            "--atom-model", workspace["atoms"],
            "--position-model", workspace["positions"],
            "--condition", "not-a-pair",
            "--out", str(tmp_path / "x.jsonl"),
        ],
    )
    assert result.exit_code == EXIT_CONFIG


def test_sample_bad_tau_exit_config(runner, workspace, tmp_path):
    result = runner.invoke(
        main,
        [
            "sample",
            "--lattice-model", workspace["lattice"],
            "--atom-model", workspace["atoms"],
            "--position-model", workspace["positions"],
            "--tau", "-0.5",
            "--out", str(tmp_path / "x.jsonl"),
        ],
    )
    assert result.exit_code == EXIT_CONFIG


def test_sample_config_file_with_flag_override(runner, workspace):
    ini = workspace["dir"] / "gen.ini"
    ini.write_text(
        "[paths]\n"
        f"lattice_model={workspace['lattice']}\n"
        f"atom_model={workspace['atoms']}\n"
        f"position_model={workspace['positions']}\n"
        "[generation]\nn_samples=1\nnum_steps=2\nmax_atoms=3\ntau=1.0\n"
    )
    out = str(workspace["dir"] / "cfg-samples.jsonl")
    result = runner.invoke(
        main, ["sample", "--config", str(ini), "--n", "2", "--out", out]
    )
    assert result.exit_code == 0, result.output
    assert json.loads(result.output)["n_samples"] == 2


def test_sample_budget_exit(runner, workspace, tmp_path):
    ini = workspace["dir"] / "budget.ini"
    ini.write_text(
        "[paths]\n"
        f"lattice_model={workspace['lattice']}\n"
        f"atom_model={workspace['atoms']}\n"
        f"position_model={workspace['positions']}\n"
        f"policy_model={workspace['disc']}\n"
        "[generation]\nn_samples=1\nnum_steps=2\nmax_atoms=3\nattempt_factor=2\n"
    )
    result = runner.invoke(
        main,
        [
            "sample", "--config", str(ini),
            "--policy", "full", "--policy-threshold", "1.1",
            "--out", str(tmp_path / "x.jsonl"),
        ],
    )
    assert result.exit_code == EXIT_BUDGET


def test_evaluate_command(runner, workspace):
    out = str(workspace["dir"] / "eval-samples.jsonl")
    result = runner.invoke(
        main,
        [
            "sample",
            "--lattice-model", workspace["lattice"],
            "--atom-model", workspace["atoms"],
            "--position-model", workspace["positions"],
            "--num-steps", "2", "--max-atoms", "3", "--n", "2",
            "--out", out,
        ],
    )
    assert result.exit_code == 0, result.output
    report_json = str(workspace["dir"] / "report.json")
    report_csv = str(workspace["dir"] / "report.csv")
    result = runner.invoke(
        main,
        ["evaluate", out, workspace["dataset"], "--out-json", report_json, "--out-csv", report_csv],
    )
    assert result.exit_code == 0, result.output
    assert json.loads(result.output)["n_samples"] == 2
    assert open(report_csv).readline().startswith("n_samples,")


def test_evaluate_missing_file_exit_io(runner, workspace, tmp_path):
    result = runner.invoke(
        main, ["evaluate", str(tmp_path / "missing.jsonl"), workspace["dataset"]]
    )
    assert result.exit_code == EXIT_IO


def test_experiment_command(runner, workspace):
    spec = workspace["dir"] / "exp.ini"
    spec.write_text(
        "[paths]\n"
        f"lattice_model={workspace['lattice']}\n"
        f"atom_model={workspace['atoms']}\n"
        f"position_model={workspace['positions']}\n"
        f"out_dir={workspace['dir'] / 'expout'}\n"
        f"reference={workspace['dataset']}\n"
        "[generation]\nn_samples=1\nnum_steps=2\nmax_atoms=3\n"
    )
    result = runner.invoke(main, ["experiment", str(spec)])
    assert result.exit_code == 0, result.output
    assert json.loads(result.output)["n_samples"] == 1


def test_experiment_missing_spec_exit_config(runner, tmp_path):
    result = runner.invoke(main, ["experiment", str(tmp_path / "missing.ini")])
    assert result.exit_code == EXIT_CONFIG


def test_sweep_command(runner, workspace):
    spec = workspace["dir"] / "sweep.ini"
    spec.write_text(
        "[paths]\n"
        f"lattice_model={workspace['lattice']}\n"
        f"atom_model={workspace['atoms']}\n"
        f"position_model={workspace['positions']}\n"
        f"out_dir={workspace['dir'] / 'sweepout'}\n"
        "[generation]\nn_samples=1\nnum_steps=2\nmax_atoms=3\n"
    )
    result = runner.invoke(
        main, ["sweep", str(spec), "--tau-p", "0.7,0.9", "--tau-p", "1.0,1.0"]
    )
    assert result.exit_code == 0, result.output
    assert len(json.loads(result.output)) == 2


def test_sweep_bad_tau_p_exit_config(runner, workspace):
    result = runner.invoke(main, ["sweep", "spec.ini", "--tau-p", "bogus"])
    assert result.exit_code == EXIT_CONFIG
