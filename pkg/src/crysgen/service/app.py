"""FastAPI service wrapping the generation pipeline.

Every endpoint operates on files visible to the server process: datasets in
the line-oriented record format, model checkpoints as JSON. The CLI is a thin
client of this app (in-process by default, HTTP against a remote server with
--url)."""

from __future__ import annotations

import dataclasses

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import atoms as atoms_mod
from .. import gmm as gmm_mod
from .. import policy as policy_mod
from .. import positions as positions_mod
from ..core import load_element_table
from ..io import CifParseError, DatasetFormatError, load_dataset
from ..metrics import evaluate
from ..pipeline import (
    AttemptBudgetExhausted,
    ConfigError,
    GenerationConfig,
    read_experiment_spec,
    run_experiment,
    run_sweep,
)
from . import schemas

app = FastAPI(title="crysgen", version="0.1.0")

_ERROR_STATUS = {
    "ConfigError": 400,
    "DatasetFormatError": 400,
    "CifParseError": 400,
    "ValueError": 400,
    "ConditioningError": 400,
    "KeyError": 400,
    "AttemptBudgetExhausted": 409,
    "SamplingError": 409,
    "FileNotFoundError": 404,
}


@app.exception_handler(Exception)
async def error_handler(request: Request, exc: Exception):
    name = type(exc).__name__
    status = _ERROR_STATUS.get(name, 500)
    return JSONResponse(
        status_code=status,
        content=schemas.ErrorResponse(error=name, detail=str(exc)).model_dump(),
    )


@app.get("/health")
def health():
    return {"status": "ok"}


@app.post("/fit/lattice", response_model=schemas.FitLatticeResponse)
def fit_lattice(req: schemas.FitLatticeRequest):
    table = load_element_table()
    records = load_dataset(req.dataset, table)
    model = gmm_mod.fit_lattice_model(
        records,
        k=req.k,
        max_iters=req.max_iters,
        seed=req.seed,
        condition_props=req.condition_props,
    )
    model.save(req.out)
    return schemas.FitLatticeResponse(
        out=req.out,
        n_components=model.mixture.n_components,
        log_likelihood=model.mixture.log_likelihood_trace[-1],
    )


@app.post("/train/atoms", response_model=schemas.TrainResponse)
def train_atoms(req: schemas.TrainAtomsRequest):
    table = load_element_table()
    records = load_dataset(req.dataset, table)
    model, history = atoms_mod.train_atom_model(
        records,
        table=table,
        epochs=req.epochs,
        lr=req.lr,
        hidden=req.hidden,
        n_layers=req.n_layers,
        condition_props=req.condition_props,
        seed=req.seed,
        optimizer_kind=req.optimizer,
    )
    model.save(req.out)
    return schemas.TrainResponse(out=req.out, final_loss=history[-1], epochs=len(history))


@app.post("/train/positions", response_model=schemas.TrainResponse)
def train_positions(req: schemas.TrainPositionsRequest):
    table = load_element_table()
    records = load_dataset(req.dataset, table)
    model, history = positions_mod.train_position_model(
        records,
        table=table,
        epochs=req.epochs,
        lr=req.lr,
        hidden=req.hidden,
        n_layers=req.n_layers,
        pairs_per_crystal=req.pairs_per_crystal,
        condition_props=req.condition_props,
        torus=req.torus,
        seed=req.seed,
        optimizer_kind=req.optimizer,
    )
    model.save(req.out)
    return schemas.TrainResponse(out=req.out, final_loss=history[-1], epochs=len(history))


@app.post("/train/policy", response_model=schemas.TrainPolicyResponse)
def train_policy(req: schemas.TrainPolicyRequest):
    table = load_element_table()
    records = load_dataset(req.dataset, table)
    model = policy_mod.train_discriminator(
        records,
        table=table,
        epochs=req.epochs,
        lr=req.lr,
        hidden=req.hidden,
        n_layers=req.n_layers,
        perturb_ratio=req.perturb_ratio,
        seed=req.seed,
    )
    model.save(req.out)
    return schemas.TrainPolicyResponse(out=req.out, holdout_accuracy=model.holdout_accuracy)


def _to_config(params: schemas.GenerationParams) -> GenerationConfig:
    return GenerationConfig(**params.model_dump())


@app.post("/generate", response_model=schemas.GenerateResponse)
def generate_endpoint(req: schemas.GenerateRequest):
    from ..io import CrystalRecord, save_dataset
    from ..pipeline import generate, load_models

    table = load_element_table()
    models = load_models(req.models.model_dump())
    samples, stats = generate(_to_config(req.config), models, table)
    records = [CrystalRecord(f"sample-{i:05d}", c) for i, c in enumerate(samples)]
    save_dataset(req.out, records)
    return schemas.GenerateResponse(
        out=req.out,
        n_samples=len(samples),
        attempts=stats.attempts,
        seconds_per_sample=stats.seconds_per_sample,
    )


@app.post("/evaluate", response_model=schemas.MetricsReportModel)
def evaluate_endpoint(req: schemas.EvaluateRequest):
    table = load_element_table()
    samples = [r.crystal for r in load_dataset(req.samples, table)]
    reference = [r.crystal for r in load_dataset(req.reference, table)]
    report = evaluate(samples, reference, table)
    if req.out_json:
        with open(req.out_json, "w") as fh:
            fh.write(report.to_json())
    if req.out_csv:
        with open(req.out_csv, "w") as fh:
            fh.write(report.to_csv_row())
    return schemas.MetricsReportModel(**dataclasses.asdict(report))


@app.post("/experiment", response_model=schemas.MetricsReportModel)
def experiment_endpoint(req: schemas.ExperimentRequest):
    paths, config = read_experiment_spec(req.spec)
    report, _ = run_experiment(paths, config)
    return schemas.MetricsReportModel(**dataclasses.asdict(report))


@app.post("/sweep", response_model=list[schemas.MetricsReportModel])
def sweep_endpoint(req: schemas.SweepRequest):
    paths, config = read_experiment_spec(req.spec)
    reports = run_sweep(
        paths,
        config,
        tau_p_grid=[tuple(tp) for tp in req.tau_p],
        policies=req.policies,
    )
    return [schemas.MetricsReportModel(**dataclasses.asdict(r)) for r in reports]
