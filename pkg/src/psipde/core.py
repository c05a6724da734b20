"""Shared data model: grids, fields, term descriptors, equations, and the
PSIG binary field format."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

PSIG_MAGIC = b"PSIG"
PSIG_VERSION = 1


class PsigError(Exception):
    """Raised on malformed PSIG files; ``code`` distinguishes failure modes."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Grid:
    """Uniform space-time grid, endpoint-inclusive on every axis.

    1D space: axes are (t, x).  2D space: axes are (t, x, y).
    """

    x_min: float
    x_max: float
    n_x: int
    t_min: float
    t_max: float
    n_t: int
    y_min: Optional[float] = None
    y_max: Optional[float] = None
    n_y: Optional[int] = None

    def __post_init__(self):
        if self.n_x < 8 or self.n_t < 8:
            raise ValueError("grid too small: need n_x >= 8 and n_t >= 8")
        if not (self.x_max > self.x_min and self.t_max > self.t_min):
            raise ValueError("grid extents must be increasing")
        has_y = [self.y_min is not None, self.y_max is not None, self.n_y is not None]
        if any(has_y) and not all(has_y):
            raise ValueError("y_min, y_max, n_y must be given together")
        if self.n_y is not None:
            if self.n_y < 8:
                raise ValueError("grid too small: need n_y >= 8")
            if not self.y_max > self.y_min:
                raise ValueError("grid extents must be increasing")

    @property
    def spatial_dims(self) -> int:
        return 2 if self.n_y is not None else 1

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def dy(self) -> float:
        if self.n_y is None:
            raise ValueError("1D grid has no dy")
        return (self.y_max - self.y_min) / (self.n_y - 1)

    @property
    def dt(self) -> float:
        return (self.t_max - self.t_min) / (self.n_t - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)

    @property
    def y(self) -> np.ndarray:
        if self.n_y is None:
            raise ValueError("1D grid has no y axis")
        return np.linspace(self.y_min, self.y_max, self.n_y)

    @property
    def t(self) -> np.ndarray:
        return np.linspace(self.t_min, self.t_max, self.n_t)

    @property
    def shape(self) -> tuple:
        if self.spatial_dims == 2:
            return (self.n_t, self.n_x, self.n_y)
        return (self.n_t, self.n_x)

    def axes(self) -> tuple:
        """Per-axis (min, max) in storage order (t, x[, y])."""
        out = [(self.t_min, self.t_max), (self.x_min, self.x_max)]
        if self.spatial_dims == 2:
            out.append((self.y_min, self.y_max))
        return tuple(out)


@dataclass(frozen=True)
class FieldTensor:
    """Sampled solution u on a grid; time-major so one time slice is
    contiguous."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "values", vals)
        if vals.shape != self.grid.shape:
            raise ValueError(
                f"values shape {vals.shape} inconsistent with grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("field contains non-finite entries")
        vals.setflags(write=False)

    def with_values(self, values: np.ndarray) -> "FieldTensor":
        return FieldTensor(self.grid, values)


@dataclass(frozen=True)
class TermSpec:
    """One candidate library term: u^p times a spatial derivative."""

    poly_power: int
    deriv: tuple  # (order in x, order in y)
    index: int  # 1-based position in the library ordering
    label: str
    grouped: bool = False  # 2D grouped term (single shared coefficient)

    def __post_init__(self):
        if not 0 <= self.poly_power <= 3:
            raise ValueError("poly_power must be in 0..3")
        if sum(self.deriv) > 3:
            raise ValueError("total derivative order must be <= 3")
        if self.index < 1:
            raise ValueError("index is 1-based")


class EquationOrigin(str, Enum):
    SELECTION = "selection"
    BRANCH = "branch"
    REFINED = "refined"


@dataclass(frozen=True)
class CandidateEquation:
    """Sparse coefficient vector over named library terms."""

    terms: tuple  # tuple of (TermSpec, float)
    origin: EquationOrigin = EquationOrigin.SELECTION
    fit_rms: float = float("nan")

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise ValueError("support must be nonempty")
        idx = [t.index for t, _ in self.terms]
        if len(set(idx)) != len(idx):
            raise ValueError("support indices must be distinct")
        if not all(np.isfinite(c) for _, c in self.terms):
            raise ValueError("coefficients must be finite")

    @property
    def support(self) -> frozenset:
        return frozenset(t.index for t, _ in self.terms)

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([c for _, c in self.terms])

    def format(self, lhs: str = "u_t") -> str:
        parts = []
        for spec, coef in self.terms:
            sign = "-" if coef < 0 else "+"
            parts.append(f"{sign} {abs(coef):.4g}*{spec.label}")
        rhs = " ".join(parts).lstrip("+ ")
        if rhs.startswith("- "):
            rhs = "-" + rhs[2:]
        return f"{lhs} = {rhs}"


class SystemKind(str, Enum):
    BURGERS1D = "burgers1d"
    KDV = "kdv"
    BURGERS2D = "burgers2d"


#: coefficient names each benchmark system requires
SYSTEM_COEFFS = {
    SystemKind.BURGERS1D: ("nu",),
    SystemKind.KDV: ("advection", "dispersion"),
    SystemKind.BURGERS2D: ("advection", "diffusion"),
}


@dataclass(frozen=True)
class SimSpec:
    """Benchmark simulation request."""

    system: SystemKind
    grid: Grid
    coefficients: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "system", SystemKind(self.system))
        coeffs = dict(self.coefficients)
        for name in SYSTEM_COEFFS[self.system]:
            if name not in coeffs:
                raise ValueError(f"{self.system.value} requires coefficient '{name}'")
            if not np.isfinite(coeffs[name]):
                raise ValueError(f"coefficient '{name}' must be finite")
        object.__setattr__(self, "coefficients", coeffs)


def field_stats(f: FieldTensor) -> dict:
    """Mean/std/min/max over all entries; std is the population standard
    deviation (divide by count)."""
    v = f.values
    if v.size == 0:
        raise ValueError("empty field")
    return {
        "mean": float(np.mean(v)),
        "std": float(np.std(v)),
        "min": float(np.min(v)),
        "max": float(np.max(v)),
    }


def field_to_bytes(f: FieldTensor) -> bytes:
    """Serialize a field in the PSIG binary format.

    Layout (little-endian): magic 'PSIG', u16 version, u8 ndim (2 or 3),
    ndim x u64 dims, per-axis (f64 min, f64 max), then f64 values in
    time-major order.
    """
    g = f.grid
    ndim = len(g.shape)
    parts = [
        PSIG_MAGIC,
        struct.pack("<HB", PSIG_VERSION, ndim),
        struct.pack(f"<{ndim}Q", *g.shape),
    ]
    for lo, hi in g.axes():
        parts.append(struct.pack("<dd", lo, hi))
    parts.append(f.values.astype("<f8").tobytes())
    return b"".join(parts)


def write_field(f: FieldTensor, path) -> None:
    """Write a field as a PSIG file; see field_to_bytes for the layout."""
    Path(path).write_bytes(field_to_bytes(f))


def read_field(path) -> FieldTensor:
    """Read a PSIG file back into a FieldTensor."""
    return field_from_bytes(Path(path).read_bytes(), source=str(path))


def field_from_bytes(data: bytes, source: str = "<bytes>") -> FieldTensor:
    """Parse PSIG bytes back into a FieldTensor."""
    path = source
    if len(data) < 7 or data[:4] != PSIG_MAGIC:
        raise PsigError("bad magic", f"{path}: not a PSIG file")
    version, ndim = struct.unpack_from("<HB", data, 4)
    if version != PSIG_VERSION:
        raise PsigError("bad version", f"{path}: unsupported version {version}")
    if ndim not in (2, 3):
        raise PsigError("bad dims", f"{path}: ndim must be 2 or 3, got {ndim}")
    off = 7
    need = ndim * 8 + ndim * 16
    if len(data) < off + need:
        raise PsigError("truncated", f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", data, off)
    off += ndim * 8
    axes = []
    for _ in range(ndim):
        axes.append(struct.unpack_from("<dd", data, off))
        off += 16
    count = int(np.prod(dims))
    if len(data) != off + 8 * count:
        raise PsigError("truncated", f"{path}: payload size mismatch")
    values = np.frombuffer(data[off:], dtype="<f8").reshape(dims)
    (t_min, t_max), (x_min, x_max) = axes[0], axes[1]
    if ndim == 3:
        y_min, y_max = axes[2]
        grid = Grid(x_min, x_max, dims[1], t_min, t_max, dims[0], y_min, y_max, dims[2])
    else:
        grid = Grid(x_min, x_max, dims[1], t_min, t_max, dims[0])
    if grid.shape != tuple(dims):
        raise PsigError("bad dims", f"{path}: dimension mismatch")
    return FieldTensor(grid, values)


def export_csv(f: FieldTensor, path) -> None:
    """CSV export: header row, one row per grid point (t,x[,y],u)."""
    g = f.grid
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if g.spatial_dims == 2:
            w.writerow(["t", "x", "y", "u"])
            for i, t in enumerate(g.t):
                for j, x in enumerate(g.x):
                    for k, y in enumerate(g.y):
                        w.writerow(
                            [repr(float(t)), repr(float(x)), repr(float(y)),
                             repr(float(f.values[i, j, k]))]
                        )
        else:
            w.writerow(["t", "x", "u"])
            for i, t in enumerate(g.t):
                for j, x in enumerate(g.x):
                    w.writerow(
                        [repr(float(t)), repr(float(x)), repr(float(f.values[i, j]))]
                    )
