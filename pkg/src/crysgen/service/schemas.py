"""Pydantic request/response models for the generation service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class FitLatticeRequest(BaseModel):
    dataset: str
    out: str
    k: int = 16
    max_iters: int = 200
    seed: int = 0
    condition_props: list[str] = Field(default_factory=list)


class FitLatticeResponse(BaseModel):
    out: str
    n_components: int
    log_likelihood: float


class TrainAtomsRequest(BaseModel):
    dataset: str
    out: str
    epochs: int = 50
    lr: float = 1e-3
    hidden: int = 128
    n_layers: int = 4
    seed: int = 0
    optimizer: str = "adam"
    condition_props: list[str] = Field(default_factory=list)


class TrainPositionsRequest(BaseModel):
    dataset: str
    out: str
    epochs: int = 100
    lr: float = 1e-3
    hidden: int = 128
    n_layers: int = 4
    pairs_per_crystal: int = 4
    torus: bool = True
    seed: int = 0
    optimizer: str = "adam"
    condition_props: list[str] = Field(default_factory=list)


class TrainResponse(BaseModel):
    out: str
    final_loss: float
    epochs: int


class TrainPolicyRequest(BaseModel):
    dataset: str
    out: str
    epochs: int = 20
    lr: float = 1e-3
    hidden: int = 64
    n_layers: int = 2
    perturb_ratio: float = 1.0
    seed: int = 0


class TrainPolicyResponse(BaseModel):
    out: str
    holdout_accuracy: float


class ModelPaths(BaseModel):
    lattice_model: str
    atom_model: str
    position_model: str
    policy_model: str | None = None


class GenerationParams(BaseModel):
    tau: float = 0.7
    top_p: float = 0.9
    max_atoms: int = 20
    num_steps: int = 250
    policy: str = "none"
    policy_threshold: float = 0.5
    conditions: dict[str, float] | None = None
    seed: int = 0
    n_samples: int = 1
    attempt_factor: int = 50


class GenerateRequest(BaseModel):
    models: ModelPaths
    config: GenerationParams = Field(default_factory=GenerationParams)
    out: str


class GenerateResponse(BaseModel):
    out: str
    n_samples: int
    attempts: int
    seconds_per_sample: float | None


class EvaluateRequest(BaseModel):
    samples: str
    reference: str
    out_json: str | None = None
    out_csv: str | None = None


class MetricsReportModel(BaseModel):
    n_samples: int
    valid_pct: float
    unique_pct: float
    novel_pct: float
    jsd: float
    mmd: float
    seconds_per_sample: float | None = None
    extra: dict = Field(default_factory=dict)


class ExperimentRequest(BaseModel):
    spec: str


class SweepRequest(BaseModel):
    spec: str
    tau_p: list[tuple[float, float]] = Field(default_factory=list)
    policies: list[str] = Field(default_factory=list)


class ErrorResponse(BaseModel):
    error: str
    detail: str
