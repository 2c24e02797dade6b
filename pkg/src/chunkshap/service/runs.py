"""End-to-end run orchestration behind the service endpoints.

Each run loads the dataset per its request, does the work with the core
modules, writes the output files into the request's output directory, and
returns the response model. Reports echo the full request so any run can be
reproduced (and so evaluate runs can rebuild the exact pipeline).
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from ..baselines import (
    GShapConfig,
    TmcConfig,
    chunk_average,
    exact_shapley,
    g_shapley,
    mlp_player_set,
    tmc_shapley,
)
from ..corruption import CorruptionReport, corrupt_table
from ..data import (
    ChunkPartition,
    Dataset,
    Schema,
    SplitResult,
    load_table,
    partition_fixed,
    partition_temporal,
    read_table,
    split_train_validation,
    write_table,
)
from ..errors import UsageError
from ..evaluation import (
    detection_recall,
    lof_average_after_removal,
    machine_fingerprint,
    measure_speedup,
    removal_curve,
)
from ..model import Architecture, MetricSpec, save_checkpoint, train
from ..seeding import child_seed
from ..valuation import CdashConfig, cdash_value
from . import schemas

_SPLIT_STREAM = 1001


def dataset_fingerprint(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def build_schema(req: schemas.TableRequest) -> Schema:
    return Schema(
        target_column=req.target_column,
        task=req.task,
        categorical_columns=tuple(req.categorical_columns),
        timestamp_column=req.timestamp_column,
        delimiter=req.delimiter,
        missing_policy=req.missing_policy,
    )


@dataclass(frozen=True)
class Pipeline:
    full: Dataset
    split: SplitResult
    partition: ChunkPartition
    arch: Architecture
    metric: MetricSpec

    @property
    def train(self) -> Dataset:
        return self.split.train

    @property
    def validation(self) -> Dataset:
        return self.split.validation


def build_pipeline(req: schemas.PipelineRequest) -> Pipeline:
    full = load_table(req.csv, build_schema(req))
    split = split_train_validation(
        full, req.validation_fraction, child_seed(req.seed, _SPLIT_STREAM)
    )
    if req.partition == "fixed":
        partition = partition_fixed(split.train, min(req.chunk_size, split.train.n))
    else:
        partition = partition_temporal(split.train, req.partition)
    arch = Architecture.for_dataset(full, hidden_dims=req.hidden_dims)
    metric = MetricSpec.for_task(req.task)
    return Pipeline(full=full, split=split, partition=partition, arch=arch, metric=metric)


def _cdash_config(req: schemas.MethodSettings, seed: int, chunk_size: int) -> CdashConfig:
    return CdashConfig(
        chunk_size=chunk_size,
        subset_count=req.subsets,
        subset_chunks=req.subset_chunks,
        threshold=req.threshold,
        eta=req.eta,
        constant=req.constant,
        eps=req.eps,
        max_iters=req.max_iters,
        max_resample=req.max_resample,
        seed=seed,
        threads=req.threads,
    )


def _tmc_config(req: schemas.MethodSettings, seed: int) -> TmcConfig:
    return TmcConfig(
        tolerance=req.tolerance,
        max_permutations=req.max_permutations,
        epochs_per_fit=req.epochs_per_fit,
        eta=req.eta,
        stability_eps=req.eps,
        budget=req.budget,
        seed=seed,
    )


def _gshap_config(req: schemas.MethodSettings, seed: int) -> GShapConfig:
    return GShapConfig(
        eta=req.eta,
        max_permutations=req.max_permutations,
        stability_eps=req.eps,
        budget=req.budget,
        seed=seed,
    )


@dataclass(frozen=True)
class MethodOutcome:
    values: np.ndarray
    unit_kind: str  # "chunk" or "tuple"
    iterations: int
    converged: bool
    history: tuple[np.ndarray, ...] = ()


def run_method(method: str, pipe: Pipeline, req: schemas.MethodSettings, seed: int,
               chunk_size: int) -> MethodOutcome:
    """Dispatch one valuation method over a built pipeline."""
    train_ds, val_ds = pipe.train, pipe.validation
    if method == "cdash":
        res = cdash_value(train_ds, val_ds, pipe.partition, pipe.arch, pipe.metric,
                          _cdash_config(req, seed, chunk_size))
        return MethodOutcome(res.values, "chunk", res.iterations_run, res.converged, res.history)
    if method == "tmc":
        res = tmc_shapley(train_ds, val_ds, pipe.arch, pipe.metric, _tmc_config(req, seed))
        return MethodOutcome(res.values, "tuple", res.iterations, res.converged)
    if method == "gshap":
        res = g_shapley(train_ds, val_ds, pipe.arch, pipe.metric, _gshap_config(req, seed))
        return MethodOutcome(res.values, "tuple", res.iterations, res.converged)
    if method == "chunk-avg":
        base = run_method(req.chunk_avg_base, pipe, req, seed, chunk_size)
        values = chunk_average(base.values, pipe.partition)
        return MethodOutcome(values, "chunk", base.iterations, base.converged)
    if method == "exact":
        c = pipe.partition.num_chunks
        if c > 12:
            raise UsageError(
                f"exact valuation enumerates 2^c coalitions; {c} chunks exceeds the 12-chunk cap"
            )
        ps = mlp_player_set(
            train_ds, val_ds, pipe.arch, pipe.metric,
            units=pipe.partition.chunks,
            epochs_per_fit=req.epochs_per_fit, eta=req.eta, seed=seed,
        )
        values = exact_shapley(ps)
        return MethodOutcome(values, "chunk", 1, True)
    raise UsageError(f"unknown method {method!r}")


def _unit_spans(outcome: MethodOutcome, pipe: Pipeline) -> list[schemas.UnitSpan]:
    if outcome.unit_kind == "chunk":
        return [
            schemas.UnitSpan(unit=j, row_start=pipe.partition.row_span(j)[0],
                             row_end=pipe.partition.row_span(j)[1])
            for j in range(pipe.partition.num_chunks)
        ]
    return [schemas.UnitSpan(unit=i, row_start=i, row_end=i + 1)
            for i in range(len(outcome.values))]


def _write_values_csv(path: Path, units: list[schemas.UnitSpan], values: np.ndarray) -> None:
    lines = ["unit_id,row_start,row_end,value"]
    lines += [
        f"{u.unit},{u.row_start},{u.row_end},{repr(float(v))}"
        for u, v in zip(units, values)
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_value(req: schemas.ValueRequest) -> schemas.ValueResponse:
    out_dir = Path(req.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = dataset_fingerprint(req.csv)
    pipe = build_pipeline(req)

    start = time.perf_counter()
    outcome = run_method(req.method, pipe, req, req.seed, req.chunk_size)
    wall = time.perf_counter() - start

    units = _unit_spans(outcome, pipe)
    files = {"values_csv": str(out_dir / "values.csv"), "report": str(out_dir / "report.json")}
    _write_values_csv(out_dir / "values.csv", units, outcome.values)
    if req.trace and outcome.history:
        trace_lines = ["iteration,chunk,value"]
        for it, vec in enumerate(outcome.history):
            trace_lines += [f"{it},{j},{repr(float(v))}" for j, v in enumerate(vec)]
        (out_dir / "trace.csv").write_text("\n".join(trace_lines) + "\n", encoding="utf-8")
        files["trace_csv"] = str(out_dir / "trace.csv")
    if req.cache_model:
        w = train(pipe.train, pipe.arch, epochs=req.train_epochs, eta=req.eta,
                  seed=child_seed(req.seed, 0))
        save_checkpoint(w, out_dir / "model.bin")
        files["model"] = str(out_dir / "model.bin")

    response = schemas.ValueResponse(
        artifact="chunkshap",
        version=__version__,
        method=req.method,
        task=req.task,
        metric=pipe.metric.kind,
        dataset=schemas.DatasetInfo(
            path=req.csv,
            sha256=fingerprint,
            rows=pipe.full.n,
            features=pipe.full.f,
            train_rows=pipe.train.n,
            validation_rows=pipe.validation.n,
            chunks=pipe.partition.num_chunks,
        ),
        units=units,
        values=[float(v) for v in outcome.values],
        iterations=outcome.iterations,
        converged=outcome.converged,
        wall_time_s=wall,
        config=req.model_dump(),
        files=files,
    )
    (out_dir / "report.json").write_text(
        json.dumps(response.model_dump(), indent=2) + "\n", encoding="utf-8"
    )
    return response


def run_corrupt(req: schemas.CorruptRequest) -> schemas.CorruptResponse:
    out_dir = Path(req.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schema = build_schema(req)
    table = read_table(req.csv, schema)
    kind = {"flip": "label_flip", "noise": "gaussian_noise", "missing": "missing"}[req.kind]
    corrupted, report = corrupt_table(
        table, schema, kind, req.fraction, seed=req.seed, sigma=req.sigma
    )
    csv_path = out_dir / "corrupted.csv"
    mask_path = out_dir / "mask.json"
    write_table(corrupted, csv_path, delimiter=req.delimiter)
    mask_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return schemas.CorruptResponse(
        kind=kind,
        affected_rows=len(report.affected_rows),
        report=report.to_dict(),
        files={"csv": str(csv_path), "mask": str(mask_path)},
    )


@dataclass(frozen=True)
class LoadedReport:
    request: schemas.ValueRequest
    values: np.ndarray
    unit_kind: str
    pipe: Pipeline


def _load_report(report_path: str, csv_path: str) -> LoadedReport:
    path = Path(report_path)
    if not path.is_file():
        raise UsageError(f"report {report_path} not found")
    payload = json.loads(path.read_text(encoding="utf-8"))
    recorded = payload.get("dataset", {}).get("sha256")
    actual = dataset_fingerprint(csv_path)
    if recorded != actual:
        raise UsageError(
            f"dataset fingerprint mismatch: report was built from sha256={recorded}, "
            f"but {csv_path} has sha256={actual}"
        )
    request = schemas.ValueRequest(**{**payload["config"], "csv": csv_path})
    pipe = build_pipeline(request)
    values = np.asarray(payload["values"], dtype=np.float64)
    unit_kind = "chunk" if len(values) == pipe.partition.num_chunks else "tuple"
    if unit_kind == "tuple" and len(values) != pipe.train.n:
        raise UsageError("report values match neither the chunk count nor the training rows")
    return LoadedReport(request=request, values=values, unit_kind=unit_kind, pipe=pipe)


def run_removal(req: schemas.RemovalRequest) -> schemas.RemovalResponse:
    out_dir = Path(req.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loaded = _load_report(req.report, req.csv)
    pipe = loaded.pipe
    partition = pipe.partition if loaded.unit_kind == "chunk" else None
    curve = removal_curve(
        pipe.train, pipe.validation, partition, loaded.values, req.lambdas,
        pipe.arch, pipe.metric, repeats=req.repeats, seed=req.seed,
        epochs=req.epochs, eta=req.eta, batch_size=req.batch_size,
    )
    raw_means = [pipe.metric.raw(m) for m in curve.mean_scores]
    csv_path = out_dir / "removal_curve.csv"
    lines = ["lambda,mean,std"]
    lines += [
        f"{lam},{repr(float(m))},{repr(float(s))}"
        for lam, m, s in zip(curve.lambdas, raw_means, curve.std_scores)
    ]
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return schemas.RemovalResponse(
        metric=pipe.metric.kind,
        lambdas=list(curve.lambdas),
        mean_scores=[float(m) for m in raw_means],
        std_scores=[float(s) for s in curve.std_scores],
        repeats=curve.repeats,
        files={"removal_curve": str(csv_path)},
    )


def run_lof(req: schemas.LofRequest) -> schemas.LofResponse:
    out_dir = Path(req.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loaded = _load_report(req.report, req.csv)
    pipe = loaded.pipe
    partition = pipe.partition if loaded.unit_kind == "chunk" else None
    means = [
        lof_average_after_removal(pipe.train, loaded.values, lam, req.k_neighbors, partition)
        for lam in req.lambdas
    ]
    csv_path = out_dir / "lof.csv"
    lines = ["lambda,mean_abs_lof"]
    lines += [f"{lam},{repr(float(m))}" for lam, m in zip(req.lambdas, means)]
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return schemas.LofResponse(
        k_neighbors=req.k_neighbors,
        lambdas=list(req.lambdas),
        mean_abs_lof=[float(m) for m in means],
        files={"lof": str(csv_path)},
    )


def run_recall(req: schemas.RecallRequest) -> schemas.RecallResponse:
    out_dir = Path(req.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loaded = _load_report(req.report, req.csv)
    pipe = loaded.pipe
    mask_path = Path(req.mask)
    if not mask_path.is_file():
        raise UsageError(f"mask {req.mask} not found")
    corruption = CorruptionReport.from_dict(json.loads(mask_path.read_text(encoding="utf-8")))

    # The mask indexes raw file rows; translate into training-split row ids.
    if pipe.full.source_rows is None:
        raise UsageError("dataset lost its source-row mapping")
    full_rows = pipe.full.source_rows[pipe.split.train_indices]
    position = {int(raw): i for i, raw in enumerate(full_rows)}
    train_mask = np.array(
        sorted(position[int(r)] for r in corruption.affected_rows if int(r) in position),
        dtype=np.int64,
    )
    if len(train_mask) == 0:
        raise UsageError("no corrupted rows fall inside the training split")
    train_report = CorruptionReport(
        kind=corruption.kind,
        affected_rows=train_mask,
        fraction=corruption.fraction,
        seed=corruption.seed,
        sigma=corruption.sigma,
    )
    partition = pipe.partition if loaded.unit_kind == "chunk" else None
    recalls = [
        detection_recall(loaded.values, train_report, partition, lam, n_rows=pipe.train.n)
        for lam in req.lambdas
    ]
    csv_path = out_dir / "recall.csv"
    lines = ["lambda,recall"]
    lines += [f"{lam},{repr(float(r))}" for lam, r in zip(req.lambdas, recalls)]
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return schemas.RecallResponse(
        lambdas=list(req.lambdas),
        recalls=[float(r) for r in recalls],
        mask_rows_in_training=len(train_mask),
        files={"recall": str(csv_path)},
    )


def run_bench(req: schemas.BenchRequest) -> schemas.BenchResponse:
    out_dir = Path(req.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pipe = build_pipeline(req)
    durations: dict[str, float] = {}

    def runner(tag: str, method: str):
        def run():
            t0 = time.perf_counter()
            try:
                return run_method(method, pipe, req, req.seed, req.chunk_size)
            finally:
                durations[tag] = time.perf_counter() - t0
        return run

    report_path = out_dir / "speedup.json"
    base = {
        "baseline": req.baseline,
        "candidate": req.candidate,
        "machine": machine_fingerprint(),
        "config": req.model_dump(),
    }
    try:
        measured = measure_speedup(
            runner("baseline", req.baseline), runner("candidate", req.candidate),
            warmup=req.warmup,
        )
    except Exception as exc:
        partial = {**base, "error": str(exc), "partial_timings": durations}
        report_path.write_text(json.dumps(partial, indent=2) + "\n", encoding="utf-8")
        raise
    payload = {
        **base,
        "t_baseline": measured.t_baseline,
        "t_candidate": measured.t_candidate,
        "speedup": measured.speedup,
    }
    report_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return schemas.BenchResponse(
        baseline=req.baseline,
        candidate=req.candidate,
        t_baseline=measured.t_baseline,
        t_candidate=measured.t_candidate,
        speedup=measured.speedup,
        machine=measured.machine,
        files={"speedup": str(report_path)},
    )
