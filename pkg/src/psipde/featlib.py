"""Numerical differentiation and candidate-library assembly.

Derivatives are central finite differences (order 2 or 4) or local
least-squares polynomial (Savitzky-Golay) differentiation.  Boundary bands
where the central stencils do not fit are flagged and dropped from the
regression rows, so the kept rows always reshape back to a full rectangular
space-time block.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d
from scipy.signal import savgol_filter

from psipde.core import FieldTensor, TermSpec


class DiffScheme(str, Enum):
    CENTRAL_FD = "central_fd"
    POLY_INTERP = "poly_interp"


# central stencils by (derivative order, accuracy order), offsets symmetric
_STENCILS = {
    (1, 2): np.array([-0.5, 0.0, 0.5]),
    (2, 2): np.array([1.0, -2.0, 1.0]),
    (3, 2): np.array([-0.5, 1.0, 0.0, -1.0, 0.5]),
    (1, 4): np.array([1 / 12, -2 / 3, 0.0, 2 / 3, -1 / 12]),
    (2, 4): np.array([-1 / 12, 4 / 3, -5 / 2, 4 / 3, -1 / 12]),
    (3, 4): np.array([1 / 8, -1.0, 13 / 8, 0.0, -13 / 8, 1.0, -1 / 8]),
}

SG_WINDOW = 9
SG_DEGREE = 4


def _fd(arr: np.ndarray, axis: int, deriv: int, h: float, order: int) -> np.ndarray:
    w = _STENCILS[(deriv, order)]
    # correlate1d computes sum_k w[k] * a[i + k - center], so w is applied
    # in offset order as written
    out = correlate1d(arr, w, axis=axis, mode="nearest")
    return out / h**deriv


def _sg(arr: np.ndarray, axis: int, deriv: int, h: float) -> np.ndarray:
    return savgol_filter(
        arr, SG_WINDOW, SG_DEGREE, deriv=deriv, delta=h, axis=axis, mode="interp"
    )


def _halfwidth(deriv: int, order: int, scheme: DiffScheme) -> int:
    if scheme == DiffScheme.POLY_INTERP:
        return SG_WINDOW // 2
    return (len(_STENCILS[(deriv, order)]) - 1) // 2


@dataclass
class DerivativeStack:
    """Derivatives of a field, full-shape arrays with boundary bands
    flagged via per-axis trim widths."""

    u_t: np.ndarray
    u_x: np.ndarray
    u_xx: np.ndarray
    u_xxx: Optional[np.ndarray]
    scheme: DiffScheme
    stencil_order: int
    trim: tuple  # layers to drop per axis, storage order (t, x[, y])
    u_y: Optional[np.ndarray] = None
    u_yy: Optional[np.ndarray] = None


def differentiate(
    f: FieldTensor,
    scheme: DiffScheme = DiffScheme.CENTRAL_FD,
    stencil_order: int = 4,
) -> DerivativeStack:
    """Compute u_t and spatial derivatives up to 3rd order (1D) or 2nd
    order per axis (2D)."""
    scheme = DiffScheme(scheme)
    if stencil_order not in (2, 4):
        raise ValueError("stencil_order must be 2 or 4")
    g = f.grid
    v = f.values

    def deriv(axis, order, h):
        if scheme == DiffScheme.POLY_INTERP:
            return _sg(v, axis, order, h)
        return _fd(v, axis, order, h, stencil_order)

    min_pts = SG_WINDOW if scheme == DiffScheme.POLY_INTERP else len(
        _STENCILS[(3, stencil_order)]
    )
    if g.n_x < min_pts or g.n_t < min_pts:
        raise ValueError("grid too small for the requested stencil")

    u_t = deriv(0, 1, g.dt)
    u_x = deriv(1, 1, g.dx)
    u_xx = deriv(1, 2, g.dx)
    hw = lambda d_ord: _halfwidth(d_ord, stencil_order, scheme)
    if g.spatial_dims == 2:
        u_y = deriv(2, 1, g.dy)
        u_yy = deriv(2, 2, g.dy)
        trim = (hw(1), hw(2), hw(2))
        return DerivativeStack(
            u_t, u_x, u_xx, None, scheme, stencil_order, trim, u_y=u_y, u_yy=u_yy
        )
    u_xxx = deriv(1, 3, g.dx)
    trim = (hw(1), hw(3))
    return DerivativeStack(u_t, u_x, u_xx, u_xxx, scheme, stencil_order, trim)


@dataclass(frozen=True)
class LibrarySpec:
    """Library layout: u powers times spatial derivatives."""

    max_poly_power: int = 3
    max_deriv_order: int = 3
    grouped_2d: bool = False


@dataclass
class LibraryMatrix:
    """Candidate-term matrix with per-column metadata.  Rows cover a full
    rectangular trimmed block so they can be reshaped for the FFT stage."""

    columns: np.ndarray  # (M, N)
    terms: list
    row_map: np.ndarray  # (M, ndim) grid indices per row
    block_shape: tuple  # trimmed block dims, (n_t', n_x'[, n_y'])
    trim: tuple
    column_norms: Optional[np.ndarray] = None

    @property
    def n_terms(self) -> int:
        return self.columns.shape[1]

    def labels(self) -> list:
        return [t.label for t in self.terms]


def _power_label(base: str, p: int) -> str:
    if p == 0:
        return ""
    if p == 1:
        return base
    return f"{base}^{p}"


def term_label(poly_power: int, deriv: tuple) -> str:
    dx_ord = deriv[0]
    dy_ord = deriv[1] if len(deriv) > 1 else 0
    dpart = ""
    if dx_ord or dy_ord:
        dpart = "u_" + "x" * dx_ord + "y" * dy_ord
    upart = _power_label("u", poly_power)
    if upart and dpart:
        return f"{upart}*{dpart}"
    return upart or dpart or "1"


_LABEL_RE = re.compile(
    r"^(?:(?P<u>u)(?:\^(?P<p>\d))?)?\*?(?:u_(?P<d>[xy]+))?$"
)


_GROUP_RE = re.compile(r"^(?:(?P<u>u)(?:\^(?P<p>\d))?\*)?\(u_(?P<a>[xy]+)\+u_(?P<b>[xy]+)\)$")


def parse_label(label: str) -> tuple:
    """Invert term_label: return (poly_power, deriv, grouped)."""
    if label == "1":
        return 0, (0, 0), False
    gm = _GROUP_RE.match(label)
    if gm:
        p = 0
        if gm.group("u"):
            p = int(gm.group("p")) if gm.group("p") else 1
        a = gm.group("a")
        return p, (a.count("x"), a.count("y")), True
    m = _LABEL_RE.match(label)
    if not m or (m.group("u") is None and m.group("d") is None):
        raise ValueError(f"unknown term label: {label!r}")
    p = 0
    if m.group("u"):
        p = int(m.group("p")) if m.group("p") else 1
    d = m.group("d") or ""
    return p, (d.count("x"), d.count("y")), False


def library_terms(spatial_dims: int, spec: Optional[LibrarySpec] = None) -> list:
    """The TermSpec list a library build would produce, without data."""
    if spatial_dims == 2:
        spec = spec or LibrarySpec(grouped_2d=True)
        terms = []
        idx = 1
        max_p = min(spec.max_poly_power, 3)
        for p in range(0, max_p + 1):
            terms.append(TermSpec(p, (0, 0), idx, term_label(p, (0, 0))))
            idx += 1
        for dlab, dtuple in (("(u_x+u_y)", (1, 0)), (("(u_xx+u_yy)"), (2, 0))):
            for p in range(0, max_p):
                upart = _power_label("u", p)
                label = f"{upart}*{dlab}" if upart else dlab
                terms.append(TermSpec(p, dtuple, idx, label, grouped=True))
                idx += 1
        return terms
    spec = spec or LibrarySpec()
    terms = []
    idx = 1
    for d_ord in range(0, spec.max_deriv_order + 1):
        for p in range(0, spec.max_poly_power + 1):
            terms.append(TermSpec(p, (d_ord, 0), idx, term_label(p, (d_ord,))))
            idx += 1
    return terms


def _trim_block(arr: np.ndarray, trim: tuple) -> np.ndarray:
    sl = tuple(slice(t, n - t) for t, n in zip(trim, arr.shape))
    return arr[sl]


def _row_map(shape: tuple, trim: tuple) -> tuple:
    axes = [np.arange(t, n - t) for t, n in zip(trim, shape)]
    mesh = np.meshgrid(*axes, indexing="ij")
    rm = np.stack([m.ravel() for m in mesh], axis=1)
    return rm, tuple(len(a) for a in axes)


def build_library(
    u: FieldTensor, d: DerivativeStack, spec: LibrarySpec = LibrarySpec()
) -> tuple:
    """Assemble the 1D candidate library and the target u_t vector.

    Default ordering (1-based): 1, u, u^2, u^3, then each spatial
    derivative times u^0..u^3, complexity-ascending.
    """
    if u.grid.spatial_dims != 1:
        raise ValueError("build_library expects a 1D field; use build_library_2d")
    derivs = {0: None, 1: d.u_x, 2: d.u_xx, 3: d.u_xxx}
    trim = d.trim
    ub = _trim_block(u.values, trim)
    row_map, block_shape = _row_map(u.values.shape, trim)
    cols, terms = [], []
    idx = 1
    for d_ord in range(0, spec.max_deriv_order + 1):
        base = np.ones_like(ub) if d_ord == 0 else _trim_block(derivs[d_ord], trim)
        for p in range(0, spec.max_poly_power + 1):
            col = base * ub**p if p else base
            label = term_label(p, (d_ord,))
            terms.append(TermSpec(p, (d_ord, 0), idx, label))
            cols.append(col.ravel())
            idx += 1
    columns = np.stack(cols, axis=1)
    if not np.all(np.isfinite(columns)):
        raise ValueError("library contains non-finite rows")
    target = _trim_block(d.u_t, trim).ravel()
    return LibraryMatrix(columns, terms, row_map, block_shape, trim), target


def build_library_2d(
    u: FieldTensor, d: DerivativeStack, spec: LibrarySpec = LibrarySpec(grouped_2d=True)
) -> tuple:
    """Curated 2D library with grouped gradient-sum and Laplacian columns
    (one shared coefficient per group), times u powers."""
    if u.grid.spatial_dims != 2:
        raise ValueError("build_library_2d expects a 2D field")
    if not spec.grouped_2d:
        raise ValueError("2D library requires grouped_2d=True")
    trim = d.trim
    ub = _trim_block(u.values, trim)
    row_map, block_shape = _row_map(u.values.shape, trim)
    grad_sum = _trim_block(d.u_x, trim) + _trim_block(d.u_y, trim)
    lap = _trim_block(d.u_xx, trim) + _trim_block(d.u_yy, trim)
    max_p = min(spec.max_poly_power, 3)
    cols, terms = [], []
    idx = 1
    for p in range(0, max_p + 1):
        cols.append((np.ones_like(ub) if p == 0 else ub**p).ravel())
        terms.append(TermSpec(p, (0, 0), idx, term_label(p, (0, 0))))
        idx += 1
    for base, dlab, dtuple in ((grad_sum, "(u_x+u_y)", (1, 0)), (lap, "(u_xx+u_yy)", (2, 0))):
        for p in range(0, max_p):
            col = base * ub**p if p else base
            upart = _power_label("u", p)
            label = f"{upart}*{dlab}" if upart else dlab
            terms.append(TermSpec(p, dtuple, idx, label, grouped=True))
            cols.append(col.ravel())
            idx += 1
    columns = np.stack(cols, axis=1)
    if not np.all(np.isfinite(columns)):
        raise ValueError("library contains non-finite rows")
    target = _trim_block(d.u_t, trim).ravel()
    return LibraryMatrix(columns, terms, row_map, block_shape, trim), target
