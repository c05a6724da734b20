"""Candidate adjudication: solve each candidate PDE forward, optimize its
coefficients against the measured field by steepest descent, and pick the
winner.

Forward solves reuse the pseudospectral method-of-lines machinery of the
simulators: purely linear terms go into an exact integrating factor, all
other terms are evaluated in physical space under a CFL-bounded RK4
substep.  Coefficient gradients are central finite differences (one
forward solve per perturbation), affordable at <= 6 free coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from psipde.core import CandidateEquation, EquationOrigin, FieldTensor, Grid
from psipde.simulate import BLOWUP_LIMIT, MAX_SUBSTEPS_PER_STORE, _dealias_mask_1d


class CandidateUnstable(Exception):
    """Forward solve of a candidate blew up."""


class ICSource(str, Enum):
    ANALYTIC = "analytic"
    FROM_DATA = "from_data"


@dataclass(frozen=True)
class RefineConfig:
    max_iters: int = 40
    step_init: float = 0.25  # initial step in initial-coefficient units
    shrink: float = 0.5
    armijo: float = 1e-4
    fd_step: float = 0.02  # relative perturbation for numerical gradients
    tol: float = 1e-7  # stop when the loss decrease falls below this
    ic_source: ICSource = ICSource.FROM_DATA
    internal_resolution: int = 256  # spatial refinement target of solves
    max_backtracks: int = 12

    def __post_init__(self):
        if not 0 < self.shrink < 1:
            raise ValueError("shrink factor must be in (0, 1)")
        if min(self.max_iters, self.step_init, self.fd_step, self.tol) <= 0:
            raise ValueError("refine parameters must be positive")


@dataclass
class CandidateResult:
    initial: CandidateEquation
    optimized: CandidateEquation
    loss_history: list
    final_loss: float
    max_rel_error: float  # max pointwise |residual| / max|data|
    stalled: bool = False
    unstable: bool = False
    insignificant: tuple = ()  # indices flagged below the contribution floor


@dataclass
class RefineReport:
    candidates: list
    winner: int  # position in candidates
    rationale: str  # "lowest_loss" | "parsimony_tiebreak"
    compared_against: str = "raw"  # which field the loss used


def _interp_periodic(slice_vals: np.ndarray, n_int: int) -> np.ndarray:
    """Trigonometric interpolation of an endpoint-inclusive sample onto a
    finer periodic grid (1D)."""
    per = slice_vals[:-1]
    spec = np.fft.rfft(per)
    return np.fft.irfft(spec, n=n_int) * (n_int / per.size)


def _interp_periodic_2d(slice_vals: np.ndarray, nx: int, ny: int) -> np.ndarray:
    per = slice_vals[:-1, :-1]
    spec = np.fft.fft2(per)
    out = np.zeros((nx, ny), dtype=complex)
    mx, my = per.shape
    ix = np.fft.fftfreq(mx, d=1.0 / mx).astype(int)
    iy = np.fft.fftfreq(my, d=1.0 / my).astype(int)
    out[np.ix_(ix % nx, iy % ny)] = spec
    return np.real(np.fft.ifft2(out)) * (nx * ny / (mx * my))


def _split_terms(eq: CandidateEquation):
    """Partition into (constant forcing, linear spectral symbol terms,
    nonlinear terms)."""
    forcing = 0.0
    linear = []
    nonlin = []
    for spec, coef in eq.terms:
        if spec.poly_power == 0 and sum(spec.deriv) == 0:
            forcing += coef
        elif spec.poly_power == 0:
            linear.append((spec, coef))
        else:
            nonlin.append((spec, coef))
    return forcing, linear, nonlin


def solve_candidate(
    eq: CandidateEquation,
    grid: Grid,
    ic: np.ndarray,
    internal_resolution: int = 256,
) -> FieldTensor:
    """Method-of-lines forward solve of u_t = sum(coef * term) from the
    given initial slice (values on the grid's spatial axes at t_min)."""
    if grid.spatial_dims == 2:
        return _solve_candidate_2d(eq, grid, ic, internal_resolution)
    r = max(1, -(-internal_resolution // (grid.n_x - 1)))
    n = (grid.n_x - 1) * r
    L_dom = grid.x_max - grid.x_min
    k = 2 * np.pi * np.fft.fftfreq(n, d=L_dom / n)
    mask = _dealias_mask_1d(n)
    u0 = _interp_periodic(np.asarray(ic, dtype=float), n)
    forcing, linear, nonlin = _split_terms(eq)
    Lop = np.zeros(n, dtype=complex)
    for spec, coef in linear:
        Lop += coef * (1j * k) ** spec.deriv[0]
    forcing_hat = np.zeros(n, dtype=complex)
    forcing_hat[0] = forcing * n

    k_eff = np.max(np.abs(k[mask]))

    def stable_dt(umax: float) -> float:
        lam = 1e-9
        for spec, coef in nonlin:
            lam += abs(coef) * umax**spec.poly_power * k_eff ** spec.deriv[0]
        return 2.0 / lam

    def rhs_nonlin(uh):
        u = np.real(np.fft.ifft(uh * mask))
        out = np.zeros(n, dtype=complex)
        for spec, coef in nonlin:
            d = spec.deriv[0]
            du = u if d == 0 else np.real(np.fft.ifft((1j * k) ** d * (uh * mask)))
            out += coef * (np.fft.fft(u**spec.poly_power * du) * mask)
        return out + forcing_hat

    uh = np.fft.fft(u0)
    stored = [u0.copy()]
    for t0, t1 in zip(grid.t[:-1], grid.t[1:]):
        span = t1 - t0
        u_now = np.real(np.fft.ifft(uh))
        umax = max(np.max(np.abs(u_now)), 1e-3)
        dt_max = min(0.4 * stable_dt(umax), span)
        n_sub = int(np.ceil(span / dt_max))
        if n_sub > MAX_SUBSTEPS_PER_STORE:
            raise CandidateUnstable("candidate unstable: CFL bound too tight")
        dt = span / n_sub
        # non-finite values only appear on blow-up, which is detected below
        with np.errstate(over="ignore", invalid="ignore"):
            E = np.exp(Lop * dt / 2)
            E2 = E * E
            for _ in range(n_sub):
                k1 = rhs_nonlin(uh)
                k2 = rhs_nonlin(E * (uh + dt / 2 * k1))
                k3 = rhs_nonlin(E * uh + dt / 2 * k2)
                k4 = rhs_nonlin(E2 * uh + dt * E * k3)
                uh = E2 * uh + dt / 6 * (E2 * k1 + 2 * E * (k2 + k3) + k4)
        u_now = np.real(np.fft.ifft(uh))
        if not np.all(np.isfinite(u_now)) or np.max(np.abs(u_now)) > BLOWUP_LIMIT:
            raise CandidateUnstable("candidate unstable: solution blow-up")
        stored.append(u_now)
    u_int = np.array(stored)
    vals = np.empty((grid.n_t, grid.n_x))
    vals[:, : grid.n_x - 1] = u_int[:, ::r]
    vals[:, -1] = u_int[:, 0]
    return FieldTensor(grid, vals)


def _solve_candidate_2d(
    eq: CandidateEquation, grid: Grid, ic: np.ndarray, internal_resolution: int
) -> FieldTensor:
    rx = max(1, -(-internal_resolution // (grid.n_x - 1)))
    ry = max(1, -(-internal_resolution // (grid.n_y - 1)))
    nx, ny = (grid.n_x - 1) * rx, (grid.n_y - 1) * ry
    Lx, Ly = grid.x_max - grid.x_min, grid.y_max - grid.y_min
    kx = 2 * np.pi * np.fft.fftfreq(nx, d=Lx / nx)[:, None]
    ky = 2 * np.pi * np.fft.fftfreq(ny, d=Ly / ny)[None, :]
    mask = _dealias_mask_1d(nx)[:, None] & _dealias_mask_1d(ny)[None, :]
    u0 = _interp_periodic_2d(np.asarray(ic, dtype=float), nx, ny)
    forcing, linear, nonlin = _split_terms(eq)
    Lop = np.zeros((nx, ny), dtype=complex)
    for spec, coef in linear:
        if spec.grouped:
            d = spec.deriv[0]
            Lop += coef * ((1j * kx) ** d + (1j * ky) ** d)
        else:
            Lop += coef * (1j * kx) ** spec.deriv[0] * (1j * ky) ** spec.deriv[1]
    forcing_hat = np.zeros((nx, ny), dtype=complex)
    forcing_hat[0, 0] = forcing * nx * ny
    k_eff = max(np.max(np.abs(kx)), np.max(np.abs(ky))) * 2 / 3

    def stable_dt(umax: float) -> float:
        lam = 1e-9
        for spec, coef in nonlin:
            d = sum(spec.deriv) if not spec.grouped else spec.deriv[0]
            lam += 2 * abs(coef) * umax**spec.poly_power * k_eff**d
        return 2.0 / lam

    def rhs_nonlin(uh):
        u = np.real(np.fft.ifft2(uh * mask))
        out = np.zeros((nx, ny), dtype=complex)
        for spec, coef in nonlin:
            if spec.grouped:
                d = spec.deriv[0]
                du = np.real(
                    np.fft.ifft2(((1j * kx) ** d + (1j * ky) ** d) * (uh * mask))
                )
            elif sum(spec.deriv) == 0:
                du = u
            else:
                du = np.real(
                    np.fft.ifft2(
                        (1j * kx) ** spec.deriv[0]
                        * (1j * ky) ** spec.deriv[1]
                        * (uh * mask)
                    )
                )
            out += coef * (np.fft.fft2(u**spec.poly_power * du) * mask)
        return out + forcing_hat

    uh = np.fft.fft2(u0)
    stored = [u0.copy()]
    for t0, t1 in zip(grid.t[:-1], grid.t[1:]):
        span = t1 - t0
        u_now = np.real(np.fft.ifft2(uh))
        umax = max(np.max(np.abs(u_now)), 1e-3)
        dt_max = min(0.4 * stable_dt(umax), span)
        n_sub = int(np.ceil(span / dt_max))
        if n_sub > MAX_SUBSTEPS_PER_STORE:
            raise CandidateUnstable("candidate unstable: CFL bound too tight")
        dt = span / n_sub
        # non-finite values only appear on blow-up, which is detected below
        with np.errstate(over="ignore", invalid="ignore"):
            E = np.exp(Lop * dt / 2)
            E2 = E * E
            for _ in range(n_sub):
                k1 = rhs_nonlin(uh)
                k2 = rhs_nonlin(E * (uh + dt / 2 * k1))
                k3 = rhs_nonlin(E * uh + dt / 2 * k2)
                k4 = rhs_nonlin(E2 * uh + dt * E * k3)
                uh = E2 * uh + dt / 6 * (E2 * k1 + 2 * E * (k2 + k3) + k4)
        u_now = np.real(np.fft.ifft2(uh))
        if not np.all(np.isfinite(u_now)) or np.max(np.abs(u_now)) > BLOWUP_LIMIT:
            raise CandidateUnstable("candidate unstable: solution blow-up")
        stored.append(u_now)
    u_int = np.array(stored)
    vals = np.empty((grid.n_t, grid.n_x, grid.n_y))
    vals[:, : grid.n_x - 1, : grid.n_y - 1] = u_int[:, ::rx, ::ry]
    vals[:, -1, :] = vals[:, 0, :]
    vals[:, :, -1] = vals[:, :, 0]
    return FieldTensor(grid, vals)


def loss(
    eq: CandidateEquation,
    data: FieldTensor,
    ic: np.ndarray,
    internal_resolution: int = 256,
) -> float:
    """RMS mismatch between the candidate's forward solution and the data;
    +inf if the solve blows up."""
    try:
        sol = solve_candidate(eq, data.grid, ic, internal_resolution)
    except CandidateUnstable:
        return float("inf")
    return float(np.sqrt(np.mean((sol.values - data.values) ** 2)))


def initial_condition(
    data: FieldTensor, cfg: RefineConfig, analytic: Optional[np.ndarray] = None
) -> np.ndarray:
    if cfg.ic_source == ICSource.ANALYTIC:
        if analytic is None:
            raise ValueError("analytic IC requested but not provided")
        return analytic
    return data.values[0]


NONMONOTONE_WINDOW = 10  # Armijo reference: worst loss over this many steps
STALL_PATIENCE = 8  # stop after this many steps without improving the best


def optimize_coeffs(
    eq: CandidateEquation, data: FieldTensor, cfg: RefineConfig, ic: np.ndarray
) -> CandidateResult:
    """Gradient descent on the forward-solve loss: Barzilai-Borwein trial
    steps along -grad with a non-monotone (windowed) Armijo backtracking
    line search, central-difference gradients, and the best-seen iterate
    returned.  The non-monotone acceptance lets the BB step traverse
    ill-conditioned valleys where a strictly monotone search crawls."""
    if len(eq.terms) > 6:
        raise ValueError("refinement supports at most 6 free coefficients")
    specs = [t for t, _ in eq.terms]
    x = np.array([c for _, c in eq.terms], dtype=float)
    scale = np.where(np.abs(x) > 0, np.abs(x), 1.0)  # per-coefficient units

    def eval_loss(z):
        terms = tuple(zip(specs, z * scale))
        return loss(
            CandidateEquation(terms, EquationOrigin.REFINED),
            data,
            ic,
            cfg.internal_resolution,
        )

    z = x / scale
    f0 = eval_loss(z)
    history = [f0]
    stalled = False
    if not np.isfinite(f0):
        final = CandidateEquation(tuple(zip(specs, x)), EquationOrigin.REFINED)
        return CandidateResult(eq, final, history, f0, float("inf"), unstable=True)
    z_prev = None
    g_prev = None
    t = None
    best_f, best_z = f0, z.copy()
    since_best = 0
    for _ in range(cfg.max_iters):
        grad = np.empty_like(z)
        for i in range(z.size):
            h = cfg.fd_step * max(abs(z[i]), 1.0)
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            grad[i] = (eval_loss(zp) - eval_loss(zm)) / (2 * h)
        gnorm = float(np.linalg.norm(grad))
        if gnorm == 0 or not np.isfinite(gnorm):
            break
        # Barzilai-Borwein trial step length for the -grad direction; the
        # first iteration moves step_init in coefficient units
        if z_prev is None:
            t = cfg.step_init / gnorm
        else:
            s = z - z_prev
            y = grad - g_prev
            sy = float(s @ y)
            t = float(s @ s) / sy if sy > 0 else t / cfg.shrink
        t = float(np.clip(t, 1e-12, cfg.step_init * 1e3 / gnorm))
        f_ref = max(history[-NONMONOTONE_WINDOW:])
        accepted = False
        for k_bt in range(cfg.max_backtracks):
            f_new = eval_loss(z - t * grad)
            if f_new <= f_ref - cfg.armijo * t * gnorm**2:
                accepted = True
                break
            t *= cfg.shrink
        if not accepted:
            stalled = True
            break
        if k_bt == 0 and z_prev is None:
            # no curvature estimate yet: expand while the loss keeps dropping
            for _ in range(cfg.max_backtracks):
                t_try = t / cfg.shrink
                f_try = eval_loss(z - t_try * grad)
                if f_try >= f_new:
                    break
                t, f_new = t_try, f_try
        z_prev, g_prev = z, grad
        z = z - t * grad
        history.append(f_new)
        if f_new < best_f - cfg.tol:
            best_f, best_z = f_new, z.copy()
            since_best = 0
        else:
            if f_new < best_f:
                best_f, best_z = f_new, z.copy()
            since_best += 1
            if since_best >= STALL_PATIENCE:
                break
    if best_f < history[-1]:
        history.append(best_f)
    xi = best_z * scale
    final = CandidateEquation(tuple(zip(specs, xi)), EquationOrigin.REFINED)
    try:
        sol = solve_candidate(final, data.grid, ic, cfg.internal_resolution)
        resid = sol.values - data.values
        max_rel = float(np.max(np.abs(resid)) / np.max(np.abs(data.values)))
    except CandidateUnstable:
        max_rel = float("inf")
    return CandidateResult(
        initial=eq,
        optimized=final,
        loss_history=history,
        final_loss=history[-1],
        max_rel_error=max_rel,
        stalled=stalled,
    )


def _contributions(eq: CandidateEquation, field: FieldTensor) -> np.ndarray:
    """Per-term RMS contribution |coef| * rms(term field) evaluated on the
    given field.

    Callers pass the candidate's own forward solution: derivatives of a
    noisy measured field would let the noise inflate high-derivative
    columns and drown out genuinely active low-order terms."""
    from psipde.featlib import DiffScheme, build_library, build_library_2d, differentiate

    d = differentiate(field, DiffScheme.CENTRAL_FD, 2)
    if field.grid.spatial_dims == 2:
        lib, _ = build_library_2d(field, d)
    else:
        lib, _ = build_library(field, d)
    by_index = {t.index: j for j, t in enumerate(lib.terms)}
    out = np.empty(len(eq.terms))
    for i, (spec, coef) in enumerate(eq.terms):
        col = lib.columns[:, by_index[spec.index]]
        out[i] = abs(coef) * np.sqrt(np.mean(col**2))
    return out


def adjudicate(
    candidates: list,
    data: FieldTensor,
    cfg: RefineConfig,
    ic: np.ndarray,
) -> RefineReport:
    """Refine every candidate and pick the winner: lowest loss, with a
    parsimony tie-break within 5% relative, after pruning terms whose
    contribution on the candidate's own solution falls below 2% of the
    largest."""
    if not candidates:
        raise ValueError("no candidates to adjudicate")
    results = []
    for eq in candidates:
        res = optimize_coeffs(eq, data, cfg, ic)
        try:
            model_field = solve_candidate(
                res.optimized, data.grid, ic, cfg.internal_resolution
            )
        except CandidateUnstable:
            results.append(res)
            continue
        contrib = _contributions(res.optimized, model_field)
        floor = 0.02 * contrib.max()
        weak = tuple(
            spec.index for (spec, _), c in zip(res.optimized.terms, contrib) if c < floor
        )
        if weak and len(res.optimized.terms) - len(weak) >= 1:
            pruned_terms = tuple(
                (s, c) for s, c in res.optimized.terms if s.index not in weak
            )
            pruned = optimize_coeffs(
                CandidateEquation(pruned_terms, EquationOrigin.REFINED), data, cfg, ic
            )
            if pruned.final_loss <= res.final_loss * 1.05:
                pruned.insignificant = weak
                res = pruned
            else:
                res.insignificant = weak
        results.append(res)
    finite = [r for r in results if np.isfinite(r.final_loss)]
    if not finite:
        raise CandidateUnstable("no viable candidate")
    best_loss = min(r.final_loss for r in finite)
    rationale = "lowest_loss"
    viable = [
        r for r in results
        if np.isfinite(r.final_loss) and r.final_loss <= best_loss * 1.05
    ]
    winner_res = min(viable, key=lambda r: (len(r.optimized.terms), r.final_loss))
    if len(viable) > 1 and winner_res.final_loss > best_loss:
        rationale = "parsimony_tiebreak"
    return RefineReport(
        candidates=results,
        winner=results.index(winner_res),
        rationale=rationale,
    )
