"""HTTP service exposing the discovery pipeline.

Each pipeline stage is an endpoint; fields travel as base64-encoded PSIG
payloads so the same bytes work on disk and over the wire.  The CLI is a
thin client of this service (in-process by default).
"""

from __future__ import annotations

import base64
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from psipde import __version__
from psipde.baseline import StridgeConfig, train_stridge
from psipde.core import (
    CandidateEquation,
    FieldTensor,
    Grid,
    PsigError,
    SimSpec,
    SystemKind,
    field_from_bytes,
    field_stats,
    field_to_bytes,
)
from psipde.denoise import TrainConfig, TrainingDiverged, fit_surrogate, resample
from psipde.featlib import (
    DiffScheme,
    build_library,
    build_library_2d,
    differentiate,
    library_terms,
)
from psipde.pipeline import (
    ConfigError,
    PipelineConfig,
    StageError,
    config_from_dict,
    default_config_toml,
    report_json,
    run_pipeline,
)
import tomli

from psipde.refine import (
    CandidateUnstable,
    ICSource,
    RefineConfig,
    adjudicate,
    initial_condition,
)
from psipde.select import SelectionConfig, psi_select
from psipde.simulate import NoiseSpec, UnstableConfiguration, add_noise, default_spec, simulate
from psipde.spectral import realify, to_freq

app = FastAPI(title="psipde", version=__version__)


# ---------------------------------------------------------------------------
# payload helpers

def _decode_field(b64: str) -> FieldTensor:
    try:
        return field_from_bytes(base64.b64decode(b64))
    except (PsigError, ValueError) as e:
        raise HTTPException(status_code=422, detail=f"bad field payload: {e}")


def _encode_field(f: FieldTensor) -> str:
    return base64.b64encode(field_to_bytes(f)).decode("ascii")


# ---------------------------------------------------------------------------
# request / response models

class GridModel(BaseModel):
    x_min: float
    x_max: float
    n_x: int
    t_min: float
    t_max: float
    n_t: int
    y_min: Optional[float] = None
    y_max: Optional[float] = None
    n_y: Optional[int] = None

    def to_grid(self) -> Grid:
        try:
            return Grid(**self.model_dump())
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e))


class SimulateRequest(BaseModel):
    system: str
    noise_level: float = 0.0
    seed: int = 0
    grid: Optional[GridModel] = None
    coefficients: Optional[dict] = None


class SimulateResponse(BaseModel):
    clean_b64: str
    measured_b64: str
    stats: dict


class TrainModel(BaseModel):
    split_fraction: float = 0.8
    patience: int = 200
    max_epochs: int = 20_000
    learning_rate: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 0
    lr_decay: float = 0.5
    max_decays: int = 8
    seed: int = 0

    def to_config(self) -> TrainConfig:
        try:
            return TrainConfig(**self.model_dump())
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e))


class DenoiseRequest(BaseModel):
    field_b64: str
    train: TrainModel = TrainModel()


class DenoiseResponse(BaseModel):
    denoised_b64: str
    epochs_run: int
    best_val_loss: float
    residual_std: float


class FeatureModel(BaseModel):
    scheme: str = "central_fd"
    stencil_order: int = 2
    cutoff_fraction: float = 0.3
    fft: bool = True


class SelectModel(BaseModel):
    n_val: int = 500
    split: float = 0.8
    gamma_reg: float = 0.05
    gamma_bic: float = 0.12
    branch_tolerance: float = 0.15
    max_terms: int = 6
    max_branches: int = 4
    seed: int = 0
    threads: int = 1

    def to_config(self) -> SelectionConfig:
        try:
            return SelectionConfig(**self.model_dump())
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e))


class DiscoverRequest(BaseModel):
    field_b64: str
    features: FeatureModel = FeatureModel()
    select: SelectModel = SelectModel()


class BranchModel(BaseModel):
    support: list
    labels: list
    coefficients: list
    val_rms: float
    is_main: bool


class DiscoverResponse(BaseModel):
    branches: list
    steps: list
    n_rows: int
    labels: dict


class TermModel(BaseModel):
    label: str
    coefficient: float


class CandidateModel(BaseModel):
    terms: list  # of TermModel dicts


class RefineModel(BaseModel):
    max_iters: int = 40
    step_init: float = 0.25
    shrink: float = 0.5
    armijo: float = 1e-4
    fd_step: float = 0.02
    tol: float = 1e-7
    ic_source: str = "from_data"
    internal_resolution: int = 256
    max_backtracks: int = 12

    def to_config(self) -> RefineConfig:
        d = self.model_dump()
        try:
            d["ic_source"] = ICSource(d["ic_source"])
            return RefineConfig(**d)
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e))


class RefineRequest(BaseModel):
    field_b64: str
    candidates: list  # of CandidateModel dicts
    refine: RefineModel = RefineModel()


class RunRequest(BaseModel):
    config_toml: Optional[str] = None
    config: Optional[dict] = None


class StridgeParams(BaseModel):
    ridge_lambda: float
    d_tol: float


class CompareStridgeRequest(BaseModel):
    field_b64: str
    params: list  # of StridgeParams dicts
    features: FeatureModel = FeatureModel()
    seed: int = 0


# ---------------------------------------------------------------------------
# endpoints

@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.get("/config")
def config_defaults() -> dict:
    return {"defaults_toml": default_config_toml()}


@app.post("/simulate", response_model=SimulateResponse)
def simulate_endpoint(req: SimulateRequest) -> SimulateResponse:
    try:
        system = SystemKind(req.system)
    except ValueError:
        raise HTTPException(status_code=422, detail=f"unknown system {req.system!r}")
    grid = req.grid.to_grid() if req.grid else default_spec(system).grid
    coeffs = req.coefficients or default_spec(system).coefficients
    try:
        clean = simulate(SimSpec(system, grid, coeffs))
    except (ValueError, UnstableConfiguration) as e:
        raise HTTPException(status_code=422, detail=str(e))
    try:
        noise = NoiseSpec(req.noise_level, seed=req.seed)
    except ValueError as e:
        raise HTTPException(status_code=422, detail=str(e))
    measured = add_noise(clean, noise)
    return SimulateResponse(
        clean_b64=_encode_field(clean),
        measured_b64=_encode_field(measured),
        stats=field_stats(measured),
    )


@app.post("/denoise", response_model=DenoiseResponse)
def denoise_endpoint(req: DenoiseRequest) -> DenoiseResponse:
    f = _decode_field(req.field_b64)
    try:
        model = fit_surrogate(f, req.train.to_config())
    except TrainingDiverged as e:
        raise HTTPException(status_code=422, detail=str(e))
    den = resample(model, f.grid)
    return DenoiseResponse(
        denoised_b64=_encode_field(den),
        epochs_run=len(model.training_history["train"]),
        best_val_loss=min(model.training_history["val"]),
        residual_std=float(np.std(f.values - den.values)),
    )


def _build_system(f: FieldTensor, feat: FeatureModel):
    try:
        scheme = DiffScheme(feat.scheme)
    except ValueError:
        raise HTTPException(status_code=422, detail=f"unknown scheme {feat.scheme!r}")
    try:
        stack = differentiate(f, scheme, feat.stencil_order)
        if f.grid.spatial_dims == 2:
            lib, target = build_library_2d(f, stack)
        else:
            lib, target = build_library(f, stack)
        if feat.fft:
            theta, b = realify(to_freq(lib, target, feat.cutoff_fraction))
        else:
            theta, b = lib.columns, target
    except ValueError as e:
        raise HTTPException(status_code=422, detail=str(e))
    return lib, theta, b


@app.post("/discover", response_model=DiscoverResponse)
def discover_endpoint(req: DiscoverRequest) -> DiscoverResponse:
    f = _decode_field(req.field_b64)
    lib, theta, b = _build_system(f, req.features)
    labels = {t.index: t.label for t in lib.terms}
    try:
        trace = psi_select(theta, b, req.select.to_config())
    except ValueError as e:
        raise HTTPException(status_code=422, detail=str(e))
    return DiscoverResponse(
        branches=[
            BranchModel(
                support=sorted(br.indices),
                labels=[labels[i] for i in sorted(br.indices)],
                coefficients=[float(c) for c in br.xi],
                val_rms=br.val_rms,
                is_main=br.is_main,
            ).model_dump()
            for br in trace.branches
        ],
        steps=[
            {
                "mode": st.mode,
                "chosen": sorted(st.chosen),
                "alternates": sorted(st.alternates),
            }
            for st in trace.steps
        ],
        n_rows=theta.shape[0],
        labels={str(k): v for k, v in labels.items()},
    )


@app.post("/refine")
def refine_endpoint(req: RefineRequest) -> dict:
    f = _decode_field(req.field_b64)
    by_label = {t.label: t for t in library_terms(f.grid.spatial_dims)}
    candidates = []
    for cand in req.candidates:
        cm = CandidateModel.model_validate(cand)
        terms = []
        for t in cm.terms:
            tm = TermModel.model_validate(t)
            if tm.label not in by_label:
                raise HTTPException(
                    status_code=422, detail=f"unknown term label {tm.label!r}"
                )
            terms.append((by_label[tm.label], tm.coefficient))
        try:
            candidates.append(CandidateEquation(tuple(terms)))
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e))
    if not candidates:
        raise HTTPException(status_code=422, detail="no candidates given")
    cfg = req.refine.to_config()
    try:
        ic = initial_condition(f, cfg)
        report = adjudicate(candidates, f, cfg, ic)
    except (CandidateUnstable, ValueError) as e:
        raise HTTPException(status_code=422, detail=str(e))
    return {
        "winner": report.winner,
        "rationale": report.rationale,
        "candidates": [
            {
                "initial": {
                    "support": sorted(r.initial.support),
                    "coefficients": [float(c) for c in r.initial.coefficients],
                },
                "optimized": {
                    "support": sorted(r.optimized.support),
                    "terms": [
                        {"label": s.label, "coefficient": float(c)}
                        for s, c in r.optimized.terms
                    ],
                    "equation": r.optimized.format(),
                },
                "final_loss": r.final_loss,
                "max_rel_error": r.max_rel_error,
                "stalled": r.stalled,
                "unstable": r.unstable,
                "insignificant": list(r.insignificant),
            }
            for r in report.candidates
        ],
    }


@app.post("/run")
def run_endpoint(req: RunRequest) -> dict:
    if (req.config_toml is None) == (req.config is None):
        raise HTTPException(
            status_code=422, detail="provide exactly one of config_toml or config"
        )
    try:
        if req.config_toml is not None:
            raw = tomli.loads(req.config_toml)
        else:
            raw = req.config
        cfg = config_from_dict(raw)
    except tomli.TOMLDecodeError as e:
        raise HTTPException(status_code=422, detail=f"invalid TOML: {e}")
    except ConfigError as e:
        raise HTTPException(status_code=422, detail=str(e))
    with tempfile.TemporaryDirectory() as tmp:
        cfg = replace(cfg, out_dir=tmp)
        try:
            result = run_pipeline(cfg)
        except StageError as e:
            raise HTTPException(
                status_code=500,
                detail={"stage": e.stage, "exit_code": e.exit_code, "message": str(e)},
            )
        artifacts = {}
        for name, path in result.artifacts.items():
            artifacts[name] = {
                "filename": Path(path).name,
                "content_b64": base64.b64encode(Path(path).read_bytes()).decode("ascii"),
            }
    return {"report": result.report, "artifacts": artifacts}


@app.post("/compare-stridge")
def compare_stridge_endpoint(req: CompareStridgeRequest) -> dict:
    f = _decode_field(req.field_b64)
    lib, theta, b = _build_system(f, req.features)
    labels = {t.index: t.label for t in lib.terms}
    rows = []
    for p in req.params:
        pm = StridgeParams.model_validate(p)
        try:
            cfg = StridgeConfig(
                ridge_lambda=pm.ridge_lambda, d_tol=pm.d_tol, seed=req.seed
            )
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e))
        res = train_stridge(theta, b, cfg)
        support = [int(i) + 1 for i in res.support]  # 1-based library indices
        rows.append(
            {
                "ridge_lambda": pm.ridge_lambda,
                "d_tol": pm.d_tol,
                "support": support,
                "labels": [labels[i] for i in support],
                "coefficients": [float(res.xi[i - 1]) for i in support],
                "val_error": res.val_error,
                "empty": res.empty,
            }
        )
    return {"rows": rows}
