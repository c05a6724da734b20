"""Progressive term selection: randomized drop-one screening to seed the
selected set, then forward add-one selection scored by validation RMS and a
complexity-penalized BIC, until further additions stop mattering.

The published procedure picks terms by visual inspection of the screening
histograms; here that step is an automated rule (largest/smallest mean
error, with near-ties spawning branch candidates that the refinement stage
adjudicates).
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from psipde.simulate import rng_stream

MSE_FLOOR = 1e-300


@dataclass(frozen=True)
class SelectionConfig:
    n_val: int = 500
    split: float = 0.8
    gamma_reg: float = 0.05
    gamma_bic: float = 0.12
    seed: int = 0
    branch_tolerance: float = 0.15
    max_terms: int = 6
    max_branches: int = 4
    threads: int = 1

    def __post_init__(self):
        if self.n_val < 50:
            raise ValueError("n_val must be >= 50")
        if not 0 < self.split < 1:
            raise ValueError("split must be in (0, 1)")
        if not (0 < self.gamma_reg < 1 and 0 < self.gamma_bic < 1):
            raise ValueError("gamma tolerances must be in (0, 1)")


@dataclass
class NormalizedSystem:
    """Column-normalized regression system with bookkeeping to report
    coefficients in original units."""

    theta: np.ndarray
    target: np.ndarray
    column_norms: np.ndarray  # norms of the kept original columns
    target_norm: float
    orig_index: np.ndarray  # 1-based original library index per kept column
    dropped: tuple = ()  # original indices of removed zero columns


@dataclass
class ScreeningResult:
    eps_reg: np.ndarray  # (n_val, N)
    eps_bic: np.ndarray
    eps_reg_ref: float
    eps_bic_ref: float
    mode: str  # "drop_one" | "add_one"
    I0: tuple
    orig_index: np.ndarray
    rank_deficient: bool = False

    @property
    def mean_reg(self) -> np.ndarray:
        return self.eps_reg.mean(axis=0)

    @property
    def mean_bic(self) -> np.ndarray:
        return self.eps_bic.mean(axis=0)


@dataclass
class SelectionStep:
    mode: str
    chosen: tuple  # main choice at this step
    alternates: tuple  # near-tie indices recorded as branches
    mean_reg: np.ndarray
    mean_bic: np.ndarray
    std_mean_reg: float
    std_mean_bic: float
    eps_reg_ref: float
    eps_bic_ref: float


@dataclass
class SelectionBranch:
    indices: tuple  # 1-based library indices, sorted
    xi: np.ndarray  # coefficients in original units
    val_rms: float  # validation-style RMS of the full-system fit
    is_main: bool


@dataclass
class SelectionTrace:
    steps: list
    branches: list  # SelectionBranch, main branch first
    config: SelectionConfig

    @property
    def main(self) -> SelectionBranch:
        return self.branches[0]


def normalize_system(theta: np.ndarray, target: np.ndarray) -> NormalizedSystem:
    """Divide each column and the target by their L2 norms, recording the
    norms; zero columns are removed with a warning."""
    target = np.asarray(target, dtype=float)
    tnorm = float(np.linalg.norm(target))
    if tnorm == 0:
        raise ValueError("degenerate target")
    norms = np.linalg.norm(theta, axis=0)
    keep = norms > 0
    if not np.all(keep):
        dropped = tuple(int(i) + 1 for i in np.flatnonzero(~keep))
        warnings.warn(f"removing all-zero library columns {dropped}")
    else:
        dropped = ()
    orig_index = np.flatnonzero(keep) + 1
    return NormalizedSystem(
        theta=theta[:, keep] / norms[keep],
        target=target / tnorm,
        column_norms=norms[keep],
        target_norm=tnorm,
        orig_index=orig_index,
        dropped=dropped,
    )


def bic_score(mse: float, n_trn: int, indSel: Sequence[int], denom_terms: int) -> float:
    """Complexity-penalized BIC: n_trn*log(mse) plus the squared-index
    penalty (sum(indSel^2) + denom^2) / denom * log(n_trn)."""
    if len(indSel) == 0:
        raise ValueError("indSel must be nonempty")
    if n_trn < 2:
        raise ValueError("n_trn must be >= 2")
    mse = max(float(mse), MSE_FLOOR)
    idx = np.asarray(indSel, dtype=float)
    penalty = (np.sum(idx**2) + denom_terms**2) / denom_terms * np.log(n_trn)
    return float(n_trn * np.log(mse) + penalty)


def bic_reference(mse0: float, n_trn: int, n_library: int) -> float:
    """Reference score of the empty model against the validation target."""
    mse0 = max(float(mse0), MSE_FLOOR)
    idx = np.arange(1, n_library + 1, dtype=float)
    penalty = (np.sum(idx**2) + n_library**2) / n_library * np.log(n_trn)
    return float(n_trn * np.log(mse0) + penalty)


def _lstsq(A: np.ndarray, b: np.ndarray) -> tuple:
    xi, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    return xi, rank


def _screen(
    ns: NormalizedSystem, cfg: SelectionConfig, mode: str, I0: tuple
) -> ScreeningResult:
    theta, target = ns.theta, ns.target
    M, N = theta.shape
    n_trn = int(cfg.split * M)
    if n_trn < 2 or M - n_trn < 1:
        raise ValueError("system too small for the train/validation split")
    orig = ns.orig_index
    pos_of = {int(o): p for p, o in enumerate(orig)}
    I0_pos = [pos_of[i] for i in I0]
    eps_reg = np.empty((cfg.n_val, N))
    eps_bic = np.empty((cfg.n_val, N))
    ref_reg = np.empty(cfg.n_val)
    ref_bic = np.empty(cfg.n_val)
    deficient = np.zeros(cfg.n_val, dtype=bool)
    n_lib = int(orig.max())

    def run_split(i: int) -> None:
        rng = rng_stream(cfg.seed, f"select.splits.{i}")
        perm = rng.permutation(M)
        trn, val = perm[:n_trn], perm[n_trn:]
        A_trn, A_val = theta[trn], theta[val]
        b_trn, b_val = target[trn], target[val]
        for j in range(N):
            if mode == "drop_one":
                cols = [c for c in range(N) if c != j]
                denom = N - 1
            else:
                cols = sorted(set(I0_pos) | {j})
                denom = len(I0) + 1
            xi, rank = _lstsq(A_trn[:, cols], b_trn)
            if rank < len(cols):
                deficient[i] = True
            resid = A_val[:, cols] @ xi - b_val
            mse = float(np.mean(resid**2))
            eps_reg[i, j] = np.sqrt(mse)
            indSel = [int(orig[c]) for c in cols]
            eps_bic[i, j] = bic_score(mse, n_trn, indSel, denom)
        ref_reg[i] = np.sqrt(np.mean(b_val**2))
        ref_bic[i] = bic_reference(np.mean(b_val**2), n_trn, n_lib)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            list(ex.map(run_split, range(cfg.n_val)))
    else:
        for i in range(cfg.n_val):
            run_split(i)
    return ScreeningResult(
        eps_reg=eps_reg,
        eps_bic=eps_bic,
        eps_reg_ref=float(ref_reg.mean()),
        eps_bic_ref=float(ref_bic.mean()),
        mode=mode,
        I0=tuple(I0),
        orig_index=orig.copy(),
        rank_deficient=bool(deficient.any()),
    )


def drop_one_screen(ns: NormalizedSystem, cfg: SelectionConfig) -> ScreeningResult:
    """Score each term by the validation error increase when it is removed
    from the full library, over n_val random splits."""
    if ns.theta.shape[1] < 2:
        raise ValueError("need at least two columns to screen")
    return _screen(ns, cfg, "drop_one", ())

def add_one_screen(
    ns: NormalizedSystem, I0: Sequence[int], cfg: SelectionConfig
) -> ScreeningResult:
    """Score each term by the validation error of fitting on I0 plus that
    term, over n_val random splits."""
    I0 = tuple(int(i) for i in I0)
    if not I0:
        raise ValueError("I0 must be nonempty")
    return _screen(ns, cfg, "add_one", I0)


def choose_terms(sr: ScreeningResult, branch_tolerance: float = 0.15) -> tuple:
    """Automated replacement for choosing terms off the histograms.

    Returns (main, alternates): the extremal-mean index plus any near-ties
    whose mean is within branch_tolerance (relative to the extremal mean)
    and whose error distribution overlaps the extremal one (pooled-std
    criterion).  In add-one mode, terms already selected are not
    candidates, and the lower-complexity (lower-index) near-tie becomes
    the main choice.
    """
    means = sr.mean_reg
    stds = sr.eps_reg.std(axis=0)
    orig = sr.orig_index
    candidates = np.arange(len(orig))
    if sr.mode == "add_one":
        candidates = candidates[~np.isin(orig, sr.I0)]
    if candidates.size == 0:
        raise ValueError("no candidate terms left")
    cmeans = means[candidates]
    pick = np.argmax(cmeans) if sr.mode == "drop_one" else np.argmin(cmeans)
    best_pos = int(candidates[pick])
    best_mean = means[best_pos]
    scale = abs(best_mean) if best_mean != 0 else 1.0
    ties = []
    for c in candidates:
        if c == best_pos:
            continue
        rel = abs(means[c] - best_mean) / scale
        pooled = np.sqrt((stds[best_pos] ** 2 + stds[c] ** 2) / 2)
        if rel <= branch_tolerance and abs(means[c] - best_mean) <= pooled:
            ties.append(int(c))
    group = sorted([best_pos] + ties, key=lambda c: orig[c])
    main = int(orig[group[0]])
    alternates = tuple(int(orig[c]) for c in group[1:])
    return main, alternates


def _fit_branch(
    ns: NormalizedSystem, indices: tuple, cfg: SelectionConfig, is_main: bool
) -> SelectionBranch:
    """Least-squares fit on the selected columns, de-normalized to original
    units."""
    pos_of = {int(o): p for p, o in enumerate(ns.orig_index)}
    cols = [pos_of[i] for i in indices]
    xi_n, _ = _lstsq(ns.theta[:, cols], ns.target)
    xi = xi_n * ns.target_norm / ns.column_norms[cols]
    resid = ns.theta[:, cols] @ xi_n - ns.target
    return SelectionBranch(
        indices=tuple(indices),
        xi=xi,
        val_rms=float(np.sqrt(np.mean(resid**2))),
        is_main=is_main,
    )


def _spread_below_tolerance(sr: ScreeningResult, cfg: SelectionConfig) -> tuple:
    std_reg = float(sr.mean_reg.std())
    std_bic = float(sr.mean_bic.std())
    done = std_reg <= cfg.gamma_reg * abs(sr.eps_reg_ref) and std_bic <= (
        cfg.gamma_bic * abs(sr.eps_bic_ref)
    )
    return done, std_reg, std_bic


def psi_select(
    theta: np.ndarray, target: np.ndarray, cfg: SelectionConfig = SelectionConfig()
) -> SelectionTrace:
    """Run the full progressive selection: drop-one seeding, then add-one
    rounds until the spread of candidate mean errors falls below both
    gamma tolerances relative to the reference errors.

    Near-ties fork branch paths (including the union of tied additions);
    every finished path is reported with de-normalized least-squares
    coefficients, the main path first.
    """
    ns = normalize_system(np.asarray(theta, dtype=float), target)
    steps = []
    sr0 = drop_one_screen(ns, cfg)
    main0, alts0 = choose_terms(sr0, cfg.branch_tolerance)
    _, s_reg0, s_bic0 = _spread_below_tolerance(sr0, cfg)
    steps.append(
        SelectionStep(
            "drop_one", (main0,), alts0, sr0.mean_reg, sr0.mean_bic,
            s_reg0, s_bic0, sr0.eps_reg_ref, sr0.eps_bic_ref,
        )
    )
    # each path: (current indices, is_main)
    paths = [((main0,), True)]
    for alt in alts0[: cfg.max_branches - 1]:
        paths.append(((alt,), False))
    finished = []
    guard = 0
    while paths:
        guard += 1
        if guard > 50:
            raise RuntimeError("selection failed to terminate")
        indices, is_main = paths.pop(0)
        while True:
            if len(indices) >= cfg.max_terms:
                break
            if len(indices) >= ns.theta.shape[1]:
                break
            sr = add_one_screen(ns, indices, cfg)
            done, s_reg, s_bic = _spread_below_tolerance(sr, cfg)
            if done:
                if is_main:
                    steps.append(
                        SelectionStep(
                            "add_one", (), (), sr.mean_reg, sr.mean_bic,
                            s_reg, s_bic, sr.eps_reg_ref, sr.eps_bic_ref,
                        )
                    )
                break
            main, alts = choose_terms(sr, cfg.branch_tolerance)
            if is_main:
                steps.append(
                    SelectionStep(
                        "add_one", (main,), alts, sr.mean_reg, sr.mean_bic,
                        s_reg, s_bic, sr.eps_reg_ref, sr.eps_bic_ref,
                    )
                )
            n_active = len(paths) + len(finished) + 1
            for alt in alts:
                if n_active >= cfg.max_branches:
                    break
                paths.append((tuple(sorted(indices + (alt,))), False))
                n_active += 1
            if alts and n_active < cfg.max_branches:
                # the union of tied additions is also a candidate model
                union = tuple(sorted(indices + (main,) + alts))
                paths.append((union, False))
            indices = tuple(sorted(indices + (main,)))
        finished.append((indices, is_main))
    # dedupe paths that converged to the same support; main branch first
    seen = {}
    for indices, is_main in finished:
        if indices in seen:
            seen[indices] = seen[indices] or is_main
        else:
            seen[indices] = is_main
    branches = [
        _fit_branch(ns, idx, cfg, im)
        for idx, im in sorted(seen.items(), key=lambda kv: (not kv[1], kv[0]))
    ]
    return SelectionTrace(steps=steps, branches=branches, config=cfg)
