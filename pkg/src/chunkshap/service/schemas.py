"""Pydantic request/response models for the service endpoints."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

Method = Literal["cdash", "tmc", "gshap", "exact", "chunk-avg"]

DEFAULT_LAMBDAS = (0.1, 0.2, 0.3, 0.4, 0.5)


def _split_csv_list(value):
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


class TableRequest(BaseModel):
    """Dataset location plus how to interpret its columns."""

    model_config = ConfigDict(extra="forbid")

    csv: str
    target_column: str
    task: Literal["classification", "regression"] = "classification"
    categorical_columns: list[str] = []
    timestamp_column: Optional[str] = None
    delimiter: str = ","
    missing_policy: Literal["drop", "mean"] = "drop"

    _split_cats = field_validator("categorical_columns", mode="before")(_split_csv_list)


class PipelineRequest(TableRequest):
    """Adds the split/partition/model settings shared by value and bench runs."""

    validation_fraction: float = 0.2
    partition: Literal["fixed", "daily", "monthly"] = "fixed"
    chunk_size: int = 250
    hidden_dims: tuple[int, int] = (64, 32)
    seed: int = 0

    @field_validator("hidden_dims", mode="before")
    @classmethod
    def _split_dims(cls, value):
        if isinstance(value, str):
            parts = [int(p) for p in value.split(",") if p.strip()]
            return tuple(parts)
        return value


class MethodSettings(BaseModel):
    """Knobs for the valuation methods; defaults follow the standard operating point."""

    model_config = ConfigDict(extra="forbid")

    subsets: int = 50
    subset_chunks: Optional[int] = None
    threshold: Optional[float] = None  # defaults to 0.5 (accuracy) or 25.0 (rmse)
    eta: float = 0.001
    constant: float = 1.0
    eps: float = 1e-3
    max_iters: int = 50
    max_resample: int = 100
    threads: int = 1
    # Monte-Carlo baseline knobs
    tolerance: Optional[float] = 0.01
    max_permutations: int = 100
    epochs_per_fit: int = 1
    budget: int = 10_000_000
    chunk_avg_base: Literal["tmc", "gshap"] = "tmc"


class ValueRequest(PipelineRequest, MethodSettings):
    method: Method = "cdash"
    output_dir: str = "."
    trace: bool = False
    cache_model: bool = False
    train_epochs: int = 20

    @model_validator(mode="after")
    def _default_threshold(self):
        if self.threshold is None:
            object.__setattr__(self, "threshold", 0.5 if self.task == "classification" else 25.0)
        return self


class UnitSpan(BaseModel):
    unit: int
    row_start: int
    row_end: int


class DatasetInfo(BaseModel):
    path: str
    sha256: str
    rows: int
    features: int
    train_rows: int
    validation_rows: int
    chunks: int


class ValueResponse(BaseModel):
    artifact: str
    version: str
    method: Method
    task: str
    metric: str
    dataset: DatasetInfo
    units: list[UnitSpan]
    values: list[float]
    iterations: int
    converged: bool
    wall_time_s: float
    config: dict
    files: dict[str, str]


class CorruptRequest(TableRequest):
    kind: Literal["flip", "noise", "missing"]
    fraction: float
    sigma: Optional[float] = None
    seed: int = 0
    output_dir: str = "."

    @model_validator(mode="after")
    def _check_fraction(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction must be in (0, 1], got {self.fraction}")
        return self


class CorruptResponse(BaseModel):
    kind: str
    affected_rows: int
    report: dict
    files: dict[str, str]


class EvaluateRequestBase(BaseModel):
    model_config = ConfigDict(extra="forbid")

    report: str  # path to a value-run report JSON
    csv: str
    output_dir: str = "."
    lambdas: list[float] = list(DEFAULT_LAMBDAS)

    _split_lambdas = field_validator("lambdas", mode="before")(
        lambda value: [float(p) for p in value.split(",")] if isinstance(value, str) else value
    )


class RemovalRequest(EvaluateRequestBase):
    repeats: int = 5
    epochs: int = 20
    eta: float = 0.001
    batch_size: int = 32
    seed: int = 0


class RemovalResponse(BaseModel):
    metric: str
    lambdas: list[float]
    mean_scores: list[float]  # raw metric units (rmse positive, lower is better)
    std_scores: list[float]
    repeats: int
    files: dict[str, str]


class LofRequest(EvaluateRequestBase):
    k_neighbors: int = 20
    lambdas: list[float] = [0.0, *DEFAULT_LAMBDAS]

    _split_lambdas = field_validator("lambdas", mode="before")(
        lambda value: [float(p) for p in value.split(",")] if isinstance(value, str) else value
    )


class LofResponse(BaseModel):
    k_neighbors: int
    lambdas: list[float]
    mean_abs_lof: list[float]
    files: dict[str, str]


class RecallRequest(EvaluateRequestBase):
    mask: str  # path to a corruption mask JSON


class RecallResponse(BaseModel):
    lambdas: list[float]
    recalls: list[float]
    mask_rows_in_training: int
    files: dict[str, str]


class BenchRequest(PipelineRequest, MethodSettings):
    baseline: Method = "tmc"
    candidate: Method = "cdash"
    output_dir: str = "."
    warmup: bool = True

    @model_validator(mode="after")
    def _default_threshold(self):
        if self.threshold is None:
            object.__setattr__(self, "threshold", 0.5 if self.task == "classification" else 25.0)
        return self


class BenchResponse(BaseModel):
    baseline: Method
    candidate: Method
    t_baseline: float
    t_candidate: float
    speedup: float
    machine: str
    files: dict[str, str]


class SelftestCheck(BaseModel):
    name: str
    ok: bool
    detail: str = ""


class SelftestResponse(BaseModel):
    passed: bool
    checks: list[SelftestCheck]


class HealthResponse(BaseModel):
    status: str
    version: str
