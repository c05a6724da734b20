"""End-to-end discovery pipeline: simulate (or load) -> denoise -> features
-> frequency filter -> progressive selection -> refinement, with TOML
configuration, per-stage error tagging, and report emission.

All randomness flows from one root seed through named sub-streams
(simulate.noise, denoise.*, select.splits.*), so a config re-run
reproduces its artifacts byte-for-byte (JSON excludes timestamps).
"""

from __future__ import annotations

import base64
import csv
import dataclasses
import io
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import tomli

from psipde.core import (
    CandidateEquation,
    FieldTensor,
    Grid,
    SimSpec,
    SystemKind,
    export_csv,
    field_stats,
    read_field,
    write_field,
)
from psipde.denoise import TrainConfig, fit_surrogate, resample, save_model
from psipde.featlib import DiffScheme, LibrarySpec, build_library, build_library_2d, differentiate
from psipde.refine import ICSource, RefineConfig, RefineReport, adjudicate, initial_condition
from psipde.select import SelectionConfig, SelectionTrace, psi_select
from psipde.simulate import NoiseSpec, add_noise, default_spec, simulate
from psipde.spectral import realify, to_freq

# Exit codes per failing stage (0 = success)
EXIT_CONFIG = 2
EXIT_SIMULATE = 3
EXIT_DENOISE = 4
EXIT_FEATURES = 5
EXIT_SELECT = 6
EXIT_REFINE = 7
EXIT_IO = 8

_STAGE_EXIT = {
    "config": EXIT_CONFIG,
    "simulate": EXIT_SIMULATE,
    "denoise": EXIT_DENOISE,
    "features": EXIT_FEATURES,
    "select": EXIT_SELECT,
    "refine": EXIT_REFINE,
    "io": EXIT_IO,
}


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = _STAGE_EXIT[stage]


class ConfigError(StageError):
    def __init__(self, message: str):
        super().__init__("config", message)


# Preprocessing defaults calibrated per benchmark system: measurement
# grid, differentiation stencil, and frequency cutoff.
SYSTEM_PRESETS = {
    SystemKind.BURGERS1D: {
        "grid": dict(x_min=-1.0, x_max=1.0, n_x=129, t_min=0.0, t_max=1.0, n_t=101),
        "stencil_order": 2,
        "cutoff_fraction": 0.3,
    },
    SystemKind.KDV: {
        "grid": dict(x_min=-1.0, x_max=1.0, n_x=257, t_min=0.0, t_max=1.0, n_t=201),
        "stencil_order": 4,
        "cutoff_fraction": 0.3,
    },
    SystemKind.BURGERS2D: {
        "grid": dict(
            x_min=-1.0, x_max=1.0, n_x=65, t_min=0.0, t_max=1.0, n_t=51,
            y_min=-1.0, y_max=1.0, n_y=65,
        ),
        "stencil_order": 2,
        "cutoff_fraction": 0.3,
    },
}

REPORT_FORMATS = ("json", "csv", "plot-data")


@dataclass(frozen=True)
class PipelineConfig:
    system: SystemKind = SystemKind.BURGERS1D
    noise_level: float = 0.0
    seed: int = 0
    out_dir: str = "out"
    denoise: Optional[bool] = None  # None: on exactly when noise_level > 0
    fft: bool = True
    formats: tuple = REPORT_FORMATS
    threads: int = 1
    grid: Optional[Grid] = None  # None: system preset
    coefficients: Optional[dict] = None  # None: benchmark defaults
    input_field: Optional[str] = None  # PSIG path; skips simulation
    scheme: DiffScheme = DiffScheme.CENTRAL_FD
    stencil_order: Optional[int] = None  # None: system preset
    cutoff_fraction: Optional[float] = None  # None: system preset
    train: TrainConfig = TrainConfig()
    select: SelectionConfig = SelectionConfig()
    refine: RefineConfig = RefineConfig()

    def __post_init__(self):
        object.__setattr__(self, "system", SystemKind(self.system))
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")
        bad = set(self.formats) - set(REPORT_FORMATS)
        if bad:
            raise ConfigError(f"unknown report formats: {sorted(bad)}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @property
    def denoise_enabled(self) -> bool:
        if self.denoise is None:
            return self.noise_level > 0
        return self.denoise

    def resolved_grid(self) -> Grid:
        if self.grid is not None:
            return self.grid
        return Grid(**SYSTEM_PRESETS[self.system]["grid"])

    def resolved_stencil(self) -> int:
        if self.stencil_order is not None:
            return self.stencil_order
        return SYSTEM_PRESETS[self.system]["stencil_order"]

    def resolved_cutoff(self) -> float:
        if self.cutoff_fraction is not None:
            return self.cutoff_fraction
        return SYSTEM_PRESETS[self.system]["cutoff_fraction"]


def _pick(table: dict, allowed: set, section: str) -> dict:
    bad = set(table) - allowed
    if bad:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(bad)}")
    return table


def config_from_dict(raw: dict) -> PipelineConfig:
    """Build a PipelineConfig from a parsed TOML table, rejecting unknown
    keys."""
    allowed_top = {"pipeline", "grid", "simulate", "denoise", "features", "select", "refine"}
    _pick(raw, allowed_top, "top level")
    p = _pick(
        dict(raw.get("pipeline", {})),
        {"system", "noise_level", "seed", "out_dir", "denoise", "fft",
         "formats", "threads", "input_field"},
        "pipeline",
    )
    kwargs = {}
    for key in ("noise_level", "seed", "out_dir", "fft", "threads", "input_field"):
        if key in p:
            kwargs[key] = p[key]
    if "system" in p:
        try:
            kwargs["system"] = SystemKind(p["system"])
        except ValueError:
            raise ConfigError(f"unknown system {p['system']!r}")
    if "denoise" in p:
        kwargs["denoise"] = bool(p["denoise"])
    if "formats" in p:
        kwargs["formats"] = tuple(p["formats"])
    if "grid" in raw:
        g = _pick(
            dict(raw["grid"]),
            {"x_min", "x_max", "n_x", "t_min", "t_max", "n_t", "y_min", "y_max", "n_y"},
            "grid",
        )
        try:
            kwargs["grid"] = Grid(**g)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid grid: {e}")
    if "simulate" in raw:
        s = _pick(dict(raw["simulate"]), {"coefficients"}, "simulate")
        if "coefficients" in s:
            kwargs["coefficients"] = dict(s["coefficients"])
    if "denoise" in raw:
        d = _pick(
            dict(raw["denoise"]),
            {f.name for f in dataclasses.fields(TrainConfig)},
            "denoise",
        )
        try:
            kwargs["train"] = TrainConfig(**d)
        except ValueError as e:
            raise ConfigError(f"invalid denoise config: {e}")
    if "features" in raw:
        f = _pick(
            dict(raw["features"]),
            {"scheme", "stencil_order", "cutoff_fraction"},
            "features",
        )
        if "scheme" in f:
            try:
                kwargs["scheme"] = DiffScheme(f["scheme"])
            except ValueError:
                raise ConfigError(f"unknown scheme {f['scheme']!r}")
        for key in ("stencil_order", "cutoff_fraction"):
            if key in f:
                kwargs[key] = f[key]
    if "select" in raw:
        s = _pick(
            dict(raw["select"]),
            {f.name for f in dataclasses.fields(SelectionConfig)},
            "select",
        )
        try:
            kwargs["select"] = SelectionConfig(**s)
        except ValueError as e:
            raise ConfigError(f"invalid select config: {e}")
    if "refine" in raw:
        r = dict(raw["refine"])
        _pick(r, {f.name for f in dataclasses.fields(RefineConfig)}, "refine")
        if "ic_source" in r:
            try:
                r["ic_source"] = ICSource(r["ic_source"])
            except ValueError:
                raise ConfigError(f"unknown ic_source {r['ic_source']!r}")
        try:
            kwargs["refine"] = RefineConfig(**r)
        except ValueError as e:
            raise ConfigError(f"invalid refine config: {e}")
    try:
        return PipelineConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e))


def load_config(path) -> PipelineConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}")
    return config_from_dict(raw)


def default_config_toml() -> str:
    """Render the default configuration with every option documented."""
    cfg = PipelineConfig()
    t, s, r = cfg.train, cfg.select, cfg.refine
    return f"""\
[pipeline]
system = "{cfg.system.value}"      # burgers1d | kdv | burgers2d
noise_level = {cfg.noise_level}         # fraction of field std added as Gaussian noise
seed = {cfg.seed}                  # root seed; all stages derive sub-streams
out_dir = "{cfg.out_dir}"
# denoise = true           # default: enabled exactly when noise_level > 0
fft = {str(cfg.fft).lower()}                 # frequency-domain low-pass regression
formats = ["json", "csv", "plot-data"]
threads = {cfg.threads}                # validation splits screened in parallel
# input_field = "measured.psig"  # skip simulation, discover from this file

# [grid]                   # defaults to the per-system preset
# x_min = -1.0
# x_max = 1.0
# n_x = 129
# t_min = 0.0
# t_max = 1.0
# n_t = 101
# y_min = -1.0             # 2D systems only
# y_max = 1.0
# n_y = 65

# [simulate]
# coefficients = {{ nu = 0.0031831 }}   # override benchmark coefficients

[denoise]
split_fraction = {t.split_fraction}
patience = {t.patience}
max_epochs = {t.max_epochs}
learning_rate = {t.learning_rate}
momentum = {t.momentum}
batch_size = {t.batch_size}           # 0 = full batch
lr_decay = {t.lr_decay}
max_decays = {t.max_decays}
seed = {t.seed}

[features]
scheme = "{cfg.scheme.value}"    # central_fd | poly_interp
# stencil_order = 2        # default: per-system preset
# cutoff_fraction = 0.3    # default: per-system preset

[select]
n_val = {s.n_val}
split = {s.split}
gamma_reg = {s.gamma_reg}
gamma_bic = {s.gamma_bic}
branch_tolerance = {s.branch_tolerance}
max_terms = {s.max_terms}
max_branches = {s.max_branches}
seed = {s.seed}
threads = {s.threads}

[refine]
max_iters = {r.max_iters}
step_init = {r.step_init}
shrink = {r.shrink}
armijo = {r.armijo}
fd_step = {r.fd_step}
tol = {r.tol}
ic_source = "{r.ic_source.value}"  # analytic | from_data
internal_resolution = {r.internal_resolution}
"""


@dataclass
class PipelineResult:
    config: PipelineConfig
    field_clean: Optional[FieldTensor]
    field_measured: FieldTensor
    field_denoised: Optional[FieldTensor]
    trace: SelectionTrace
    refine_report: RefineReport
    labels: dict  # library index -> term label
    report: dict  # serializable report
    artifacts: dict  # name -> path written


def _equation_dict(eq: CandidateEquation) -> dict:
    return {
        "support": sorted(eq.support),
        "terms": [
            {"index": s.index, "label": s.label, "coefficient": float(c)}
            for s, c in eq.terms
        ],
        "equation": eq.format(),
    }


def run_pipeline(cfg: PipelineConfig, write_artifacts: bool = True) -> PipelineResult:
    out = Path(cfg.out_dir)
    artifacts = {}
    log_lines = []

    def save_field(name: str, f: FieldTensor):
        if not write_artifacts:
            return
        path = out / f"{name}.psig"
        write_field(f, path)
        artifacts[name] = str(path)

    if write_artifacts:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StageError("io", f"cannot create output directory: {e}")

    # --- simulate / load -------------------------------------------------
    clean = None
    if cfg.input_field is not None:
        try:
            measured = read_field(cfg.input_field)
        except Exception as e:
            raise StageError("simulate", f"cannot read input field: {e}")
        grid = measured.grid
        log_lines.append(f"loaded field {cfg.input_field} shape={grid.shape}")
    else:
        grid = cfg.resolved_grid()
        coeffs = cfg.coefficients or default_spec(cfg.system).coefficients
        try:
            clean = simulate(SimSpec(cfg.system, grid, coeffs))
        except Exception as e:
            raise StageError("simulate", str(e))
        measured = add_noise(clean, NoiseSpec(cfg.noise_level, seed=cfg.seed))
        save_field("clean", clean)
        log_lines.append(f"simulated {cfg.system.value} on {grid.shape}")
    save_field("measured", measured)

    # --- denoise ---------------------------------------------------------
    denoised = None
    if cfg.denoise_enabled:
        try:
            train = replace(cfg.train, seed=cfg.seed)
            model = fit_surrogate(measured, train)
            denoised = resample(model, grid)
        except Exception as e:
            raise StageError("denoise", str(e))
        save_field("denoised", denoised)
        if write_artifacts:
            mpath = out / "surrogate.psin"
            save_model(model, mpath)
            artifacts["surrogate"] = str(mpath)
        resid = measured.values - denoised.values
        log_lines.append(
            f"denoised: residual std {np.std(resid):.4g} "
            f"({np.std(resid) / field_stats(measured)['std']:.1%} of measured std)"
        )
    working = denoised if denoised is not None else measured

    # --- features + frequency filter ------------------------------------
    try:
        stack = differentiate(working, cfg.scheme, cfg.resolved_stencil())
        if grid.spatial_dims == 2:
            lib, target = build_library_2d(working, stack)
        else:
            lib, target = build_library(working, stack)
        if cfg.fft:
            fs = to_freq(lib, target, cfg.resolved_cutoff())
            theta, b = realify(fs)
            log_lines.append(
                f"library {lib.columns.shape} -> {theta.shape[0]} frequency rows "
                f"(cutoff {cfg.resolved_cutoff()})"
            )
        else:
            theta, b = lib.columns, target
            log_lines.append(f"library {lib.columns.shape} (no frequency filter)")
    except Exception as e:
        raise StageError("features", str(e))
    labels = {t.index: t.label for t in lib.terms}

    # --- selection -------------------------------------------------------
    try:
        sel = replace(cfg.select, seed=cfg.seed, threads=cfg.threads)
        trace = psi_select(theta, b, sel)
    except Exception as e:
        raise StageError("select", str(e))
    log_lines.append(
        "selection branches: "
        + "; ".join(
            f"{sorted(br.indices)}{' (main)' if br.is_main else ''}"
            for br in trace.branches
        )
    )

    # --- refinement ------------------------------------------------------
    # Refinement always compares against the raw measurements: zero-mean
    # noise only lifts the loss floor uniformly, whereas the denoiser's
    # smoothing bias would leak into the coefficients.  The initial slice,
    # which does propagate through the solve, is taken from the denoised
    # field when one exists.
    compare = measured
    compared_against = "raw"
    ic_field = denoised if denoised is not None else measured
    try:
        by_index = {t.index: t for t in lib.terms}
        candidates = [
            CandidateEquation(
                tuple(
                    (by_index[i], float(c)) for i, c in zip(br.indices, br.xi)
                ),
            )
            for br in trace.branches
        ]
        analytic_ic = None
        if cfg.refine.ic_source == ICSource.ANALYTIC and cfg.input_field is None:
            analytic_ic = _analytic_ic(cfg.system, grid)
        ic = initial_condition(ic_field, cfg.refine, analytic_ic)
        report = adjudicate(candidates, compare, cfg.refine, ic)
        report.compared_against = compared_against
    except Exception as e:
        raise StageError("refine", str(e))
    winner = report.candidates[report.winner]
    log_lines.append(
        f"winner {sorted(winner.optimized.support)} ({report.rationale}): "
        + winner.optimized.format()
    )

    # --- report ----------------------------------------------------------
    rep = {
        "system": cfg.system.value if cfg.input_field is None else None,
        "noise_level": cfg.noise_level,
        "seed": cfg.seed,
        "grid": {"shape": list(grid.shape)},
        "stages": {
            "denoise": cfg.denoise_enabled,
            "fft": cfg.fft,
            "scheme": cfg.scheme.value,
            "stencil_order": cfg.resolved_stencil(),
            "cutoff_fraction": cfg.resolved_cutoff() if cfg.fft else None,
        },
        "selection": {
            "branches": [
                {
                    "support": sorted(br.indices),
                    "labels": [labels[i] for i in sorted(br.indices)],
                    "coefficients": _branch_coeffs(br),
                    "val_rms": br.val_rms,
                    "is_main": br.is_main,
                }
                for br in trace.branches
            ],
            "steps": [
                {
                    "mode": st.mode,
                    "chosen": sorted(st.chosen),
                    "alternates": sorted(st.alternates),
                }
                for st in trace.steps
            ],
        },
        "refine": {
            "compared_against": compared_against,
            "winner": report.winner,
            "rationale": report.rationale,
            "candidates": [
                {
                    "initial": _equation_dict(r.initial),
                    "optimized": _equation_dict(r.optimized),
                    "final_loss": r.final_loss,
                    "max_rel_error": r.max_rel_error,
                    "stalled": r.stalled,
                    "unstable": r.unstable,
                    "insignificant": list(r.insignificant),
                    "n_loss_evals": len(r.loss_history),
                }
                for r in report.candidates
            ],
        },
        "equation": winner.optimized.format(),
        "log": log_lines,
    }
    if clean is not None:
        rep["coefficient_errors"] = _coefficient_errors(cfg.system, winner.optimized)

    result = PipelineResult(
        config=cfg,
        field_clean=clean,
        field_measured=measured,
        field_denoised=denoised,
        trace=trace,
        refine_report=report,
        labels=labels,
        report=rep,
        artifacts=artifacts,
    )
    if write_artifacts:
        emit_report(result, cfg.formats, out)
        (out / "log.txt").write_text("\n".join(log_lines) + "\n")
        artifacts["log"] = str(out / "log.txt")
    return result


def _branch_coeffs(br) -> list:
    return [float(c) for c in br.xi]


def _analytic_ic(system: SystemKind, grid: Grid) -> np.ndarray:
    if system == SystemKind.BURGERS1D:
        return -np.sin(np.pi * grid.x)
    if system == SystemKind.KDV:
        return np.cos(np.pi * grid.x)
    X, Y = np.meshgrid(grid.x, grid.y, indexing="ij")
    return 0.1 / np.cosh(20 * X**2 + 25 * Y**2)


# ground-truth winners for the benchmark systems: label -> coefficient
_TRUTH = {
    SystemKind.BURGERS1D: {"u*u_x": -1.0, "u_xx": 0.01 / np.pi},
    SystemKind.KDV: {"u*u_x": -1.0, "u_xxx": -0.0025},
    SystemKind.BURGERS2D: {"u*(u_x+u_y)": -1.0, "(u_xx+u_yy)": 0.01},
}


def _coefficient_errors(system: SystemKind, eq: CandidateEquation) -> dict:
    truth = _TRUTH[system]
    out = {"support_match": sorted(s.label for s, _ in eq.terms) == sorted(truth)}
    errors = {}
    for spec, coef in eq.terms:
        if spec.label in truth:
            t = truth[spec.label]
            errors[spec.label] = {
                "true": t,
                "learned": float(coef),
                "rel_error": float(abs(coef - t) / abs(t)),
            }
        else:
            errors[spec.label] = {"true": None, "learned": float(coef), "rel_error": None}
    out["terms"] = errors
    return out


def report_json(rep: dict) -> str:
    return json.dumps(rep, indent=2, sort_keys=True)


def emit_report(result: PipelineResult, formats, out_dir) -> dict:
    """Write the report in the requested formats; returns name -> path."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StageError("io", f"cannot create report directory: {e}")
    written = {}
    formats = set(formats)
    bad = formats - set(REPORT_FORMATS)
    if bad:
        raise StageError("io", f"unknown report formats: {sorted(bad)}")
    if "json" in formats:
        path = out / "report.json"
        path.write_text(report_json(result.report) + "\n")
        written["report_json"] = str(path)
    if "csv" in formats:
        path = out / "report.csv"
        _write_summary_csv(result, path)
        written["report_csv"] = str(path)
        cpath = out / "candidates.csv"
        _write_candidates_csv(result, cpath)
        written["candidates_csv"] = str(cpath)
    if "plot-data" in formats:
        written.update(_write_plot_data(result, out))
    result.artifacts.update(written)
    return written


def _write_summary_csv(result: PipelineResult, path) -> None:
    rep = result.report
    errs = rep.get("coefficient_errors", {}).get("terms", {})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["noise", "equation", "coeff_errors"])
        err_str = "; ".join(
            f"{label}: {info['rel_error']:.2%}" if info["rel_error"] is not None
            else f"{label}: n/a"
            for label, info in errs.items()
        )
        w.writerow([rep["noise_level"], rep["equation"], err_str])


def _write_candidates_csv(result: PipelineResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["candidate", "support", "equation", "loss", "max_rel_error", "winner"])
        for i, c in enumerate(result.report["refine"]["candidates"]):
            w.writerow(
                [
                    i,
                    " ".join(map(str, c["optimized"]["support"])),
                    c["optimized"]["equation"],
                    c["final_loss"],
                    c["max_rel_error"],
                    i == result.report["refine"]["winner"],
                ]
            )


def _write_plot_data(result: PipelineResult, out: Path) -> dict:
    """Measured / learned / residual fields as (t, x[, y], u) rows."""
    from psipde.refine import solve_candidate

    written = {}
    measured = result.field_measured
    winner = result.refine_report.candidates[result.refine_report.winner]
    ic_field = (
        result.field_denoised if result.field_denoised is not None else measured
    )
    try:
        learned = solve_candidate(
            winner.optimized,
            measured.grid,
            ic_field.values[0],
            result.config.refine.internal_resolution,
        )
    except Exception:
        learned = None
    pairs = [("measured", measured)]
    if learned is not None:
        residual = measured.with_values(learned.values - measured.values)
        pairs += [("learned", learned), ("residual", residual)]
    for name, f in pairs:
        path = out / f"plot_{name}.csv"
        export_csv(f, path)
        written[f"plot_{name}"] = str(path)
    return written
