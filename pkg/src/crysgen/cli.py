"""Command-line client for the generation service.

Every subcommand talks to the FastAPI app: in-process by default, or against
a running server with --url. Exit codes: 0 success, 2 config error, 3 attempt
budget exhausted, 4 I/O error.
"""

from __future__ import annotations

import configparser
import json
import sys

import click

EXIT_CONFIG = 2
EXIT_BUDGET = 3
EXIT_IO = 4

_EXIT_BY_ERROR = {
    "ConfigError": EXIT_CONFIG,
    "ValueError": EXIT_CONFIG,
    "ConditioningError": EXIT_CONFIG,
    "KeyError": EXIT_CONFIG,
    "RequestValidationError": EXIT_CONFIG,
    "AttemptBudgetExhausted": EXIT_BUDGET,
    "SamplingError": EXIT_BUDGET,
    "FileNotFoundError": EXIT_IO,
    "IsADirectoryError": EXIT_IO,
    "PermissionError": EXIT_IO,
    "DatasetFormatError": EXIT_IO,
    "CifParseError": EXIT_IO,
    "OSError": EXIT_IO,
}


class ServiceClient:
    """Thin HTTP client; uses an in-process app when no URL is given."""

    def __init__(self, url: str | None):
        if url:
            import httpx

            self._client = httpx.Client(base_url=url, timeout=None)
        else:
            from fastapi.testclient import TestClient

            from .service.app import app

            self._client = TestClient(app, raise_server_exceptions=False)

    def post(self, path: str, payload: dict) -> dict:
        resp = self._client.post(path, json=payload)
        try:
            body = resp.json()
        except ValueError:
            body = {"error": "ServiceError", "detail": resp.text}
        if resp.status_code >= 400:
            name = body.get("error", "ServiceError")
            if resp.status_code == 422 and "detail" in body and "error" not in body:
                name = "RequestValidationError"
            detail = body.get("detail", body)
            click.echo(f"error ({name}): {detail}", err=True)
            sys.exit(_EXIT_BY_ERROR.get(name, 1))
        return body


pass_client = click.make_pass_decorator(ServiceClient)


@click.group()
@click.option("--url", default=None, help="Base URL of a running crysgen server; in-process when omitted.")
@click.pass_context
def main(ctx, url):
    """Crystal generation pipeline: fit, train, sample, evaluate."""
    ctx.obj = ServiceClient(url)


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
def serve(host, port):
    """Run the generation service."""
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=host, port=port)


@main.command("fit-lattice")
@click.argument("dataset")
@click.option("--out", required=True)
@click.option("--k", default=16, type=int, help="Mixture components.")
@click.option("--max-iters", default=200, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--condition-prop", "condition_props", multiple=True)
@pass_client
def fit_lattice(client, dataset, out, k, max_iters, seed, condition_props):
    """Fit the lattice mixture by EM."""
    body = client.post(
        "/fit/lattice",
        {
            "dataset": dataset,
            "out": out,
            "k": k,
            "max_iters": max_iters,
            "seed": seed,
            "condition_props": list(condition_props),
        },
    )
    click.echo(json.dumps(body))


@main.command("train-atoms")
@click.argument("dataset")
@click.option("--out", required=True)
@click.option("--epochs", default=50, type=int)
@click.option("--lr", default=1e-3, type=float)
@click.option("--hidden", default=128, type=int)
@click.option("--layers", "n_layers", default=4, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--optimizer", default="adam", type=click.Choice(["adam", "sgd"]))
@click.option("--condition-prop", "condition_props", multiple=True)
@pass_client
def train_atoms(client, dataset, out, epochs, lr, hidden, n_layers, seed, optimizer, condition_props):
    """Train the autoregressive atom-type model."""
    body = client.post(
        "/train/atoms",
        {
            "dataset": dataset,
            "out": out,
            "epochs": epochs,
            "lr": lr,
            "hidden": hidden,
            "n_layers": n_layers,
            "seed": seed,
            "optimizer": optimizer,
            "condition_props": list(condition_props),
        },
    )
    click.echo(json.dumps(body))


@main.command("train-positions")
@click.argument("dataset")
@click.option("--out", required=True)
@click.option("--epochs", default=100, type=int)
@click.option("--lr", default=1e-3, type=float)
@click.option("--hidden", default=128, type=int)
@click.option("--layers", "n_layers", default=4, type=int)
@click.option("--pairs-per-crystal", default=4, type=int)
@click.option("--euclidean", is_flag=True, help="Use straight-line interpolation instead of the torus geodesic.")
@click.option("--seed", default=0, type=int)
@click.option("--optimizer", default="adam", type=click.Choice(["adam", "sgd"]))
@click.option("--condition-prop", "condition_props", multiple=True)
@pass_client
def train_positions(client, dataset, out, epochs, lr, hidden, n_layers, pairs_per_crystal,
                    euclidean, seed, optimizer, condition_props):
    """Train the position flow-matching model."""
    body = client.post(
        "/train/positions",
        {
            "dataset": dataset,
            "out": out,
            "epochs": epochs,
            "lr": lr,
            "hidden": hidden,
            "n_layers": n_layers,
            "pairs_per_crystal": pairs_per_crystal,
            "torus": not euclidean,
            "seed": seed,
            "optimizer": optimizer,
            "condition_props": list(condition_props),
        },
    )
    click.echo(json.dumps(body))


@main.command("train-policy")
@click.argument("dataset")
@click.option("--out", required=True)
@click.option("--epochs", default=20, type=int)
@click.option("--lr", default=1e-3, type=float)
@click.option("--hidden", default=64, type=int)
@click.option("--layers", "n_layers", default=2, type=int)
@click.option("--perturb-ratio", default=1.0, type=float)
@click.option("--seed", default=0, type=int)
@pass_client
def train_policy(client, dataset, out, epochs, lr, hidden, n_layers, perturb_ratio, seed):
    """Train the real-vs-fake discriminator used by partial/full policies."""
    body = client.post(
        "/train/policy",
        {
            "dataset": dataset,
            "out": out,
            "epochs": epochs,
            "lr": lr,
            "hidden": hidden,
            "n_layers": n_layers,
            "perturb_ratio": perturb_ratio,
            "seed": seed,
        },
    )
    click.echo(json.dumps(body))


def _parse_conditions(pairs) -> dict[str, float] | None:
    if not pairs:
        return None
    out = {}
    for pair in pairs:
        if "=" not in pair:
            click.echo(f"error (ConfigError): condition {pair!r} must be name=value", err=True)
            sys.exit(EXIT_CONFIG)
        name, value = pair.split("=", 1)
        try:
            out[name] = float(value)
        except ValueError:
            click.echo(f"error (ConfigError): condition value {value!r} is not a number", err=True)
            sys.exit(EXIT_CONFIG)
    return out


def _spec_paths(config_file) -> dict:
    parser = configparser.ConfigParser()
    if not parser.read(config_file):
        click.echo(f"error (FileNotFoundError): cannot read {config_file}", err=True)
        sys.exit(EXIT_IO)
    return dict(parser["paths"]) if "paths" in parser else {}


@main.command()
@click.option("--config", "config_file", default=None, help="Experiment INI file; flags override its values.")
@click.option("--lattice-model", default=None)
@click.option("--atom-model", default=None)
@click.option("--position-model", default=None)
@click.option("--policy-model", default=None)
@click.option("--tau", default=None, type=float)
@click.option("--top-p", default=None, type=float)
@click.option("--max-atoms", default=None, type=int)
@click.option("--num-steps", default=None, type=int)
@click.option("--policy", default=None, type=click.Choice(["none", "partial", "full", "smact"]))
@click.option("--policy-threshold", default=None, type=float)
@click.option("--condition", "conditions", multiple=True, help="name=value, repeatable.")
@click.option("--seed", default=None, type=int)
@click.option("--n", "n_samples", default=None, type=int)
@click.option("--out", required=True)
@pass_client
def sample(client, config_file, lattice_model, atom_model, position_model, policy_model,
           tau, top_p, max_atoms, num_steps, policy, policy_threshold, conditions,
           seed, n_samples, out):
    """Generate crystals with the trained three-stage pipeline."""
    paths: dict = {}
    gen: dict = {}
    if config_file:
        parser = configparser.ConfigParser()
        if not parser.read(config_file):
            click.echo(f"error (FileNotFoundError): cannot read {config_file}", err=True)
            sys.exit(EXIT_IO)
        paths = dict(parser["paths"]) if "paths" in parser else {}
        gen = dict(parser["generation"]) if "generation" in parser else {}
        if "conditions" in parser and _parse_conditions(
            [f"{k}={v}" for k, v in parser["conditions"].items()]
        ):
            gen["conditions"] = {k: float(v) for k, v in parser["conditions"].items()}

    models = {
        "lattice_model": lattice_model or paths.get("lattice_model"),
        "atom_model": atom_model or paths.get("atom_model"),
        "position_model": position_model or paths.get("position_model"),
        "policy_model": policy_model or paths.get("policy_model"),
    }
    missing = [k for k in ("lattice_model", "atom_model", "position_model") if not models[k]]
    if missing:
        click.echo(f"error (ConfigError): missing model paths {missing}", err=True)
        sys.exit(EXIT_CONFIG)

    def pick(flag, key, cast, default):
        if flag is not None:
            return flag
        if key in gen:
            return cast(gen[key])
        return default

    payload_config = {
        "tau": pick(tau, "tau", float, 0.7),
        "top_p": pick(top_p, "top_p", float, 0.9),
        "max_atoms": pick(max_atoms, "max_atoms", int, 20),
        "num_steps": pick(num_steps, "num_steps", int, 250),
        "policy": pick(policy, "policy", str, "none"),
        "policy_threshold": pick(policy_threshold, "policy_threshold", float, 0.5),
        "conditions": _parse_conditions(conditions) or gen.get("conditions"),
        "seed": pick(seed, "seed", int, 0),
        "n_samples": pick(n_samples, "n_samples", int, 1),
        "attempt_factor": int(gen.get("attempt_factor", 50)),
    }
    body = client.post("/generate", {"models": models, "config": payload_config, "out": out})
    click.echo(json.dumps(body))


@main.command()
@click.argument("samples")
@click.argument("reference")
@click.option("--out-json", default=None)
@click.option("--out-csv", default=None)
@pass_client
def evaluate(client, samples, reference, out_json, out_csv):
    """Evaluate generated samples against a reference dataset."""
    body = client.post(
        "/evaluate",
        {"samples": samples, "reference": reference, "out_json": out_json, "out_csv": out_csv},
    )
    click.echo(json.dumps(body, indent=2))


@main.command()
@click.argument("spec")
@pass_client
def experiment(client, spec):
    """Run a full generate-and-evaluate experiment from an INI spec."""
    body = client.post("/experiment", {"spec": spec})
    click.echo(json.dumps(body, indent=2))


@main.command()
@click.argument("spec")
@click.option("--tau-p", "tau_p", multiple=True, help="tau,P pair, e.g. 0.7,0.9; repeatable.")
@click.option("--policy-grid", default=None, help="Comma-separated policies to sweep.")
@pass_client
def sweep(client, spec, tau_p, policy_grid):
    """Sweep sampling parameters and/or policies, one report per combination."""
    pairs = []
    for item in tau_p:
        try:
            t, p = item.split(",")
            pairs.append((float(t), float(p)))
        except ValueError:
            click.echo(f"error (ConfigError): bad --tau-p {item!r}", err=True)
            sys.exit(EXIT_CONFIG)
    policies = [p.strip() for p in policy_grid.split(",")] if policy_grid else []
    body = client.post("/sweep", {"spec": spec, "tau_p": pairs, "policies": policies})
    click.echo(json.dumps(body, indent=2))


if __name__ == "__main__":
    main()
