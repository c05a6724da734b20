"""Frequency-domain transform of the regression system with low-pass mode
selection.

Each library column is transformed after nonlinear term construction in
real space (transform of the product, not product of transforms), which
keeps the regression linear in the coefficients.  Only modes inside an
ellipsoidal ball of normalized wavenumber radius <= cutoff_fraction are
kept, with Hermitian-redundant modes deduplicated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from psipde.featlib import LibraryMatrix


@dataclass
class FreqSystem:
    """Low-pass frequency-domain regression pair (theta, target)."""

    theta: np.ndarray  # complex (M', N)
    target: np.ndarray  # complex (M',)
    kept_modes: np.ndarray  # (M', ndim) integer wavenumbers
    cutoff_fraction: float
    block_shape: tuple
    weights: np.ndarray  # 1 for self-conjugate modes, 2 for deduplicated pairs


def _mode_grid(shape: tuple) -> tuple:
    """Integer wavenumbers per axis and the normalized radius array."""
    ks = [np.fft.fftfreq(n, d=1.0 / n).astype(int) for n in shape]
    mesh = np.meshgrid(*ks, indexing="ij")
    radius2 = np.zeros(shape)
    for m, n in zip(mesh, shape):
        nyq = max(n // 2, 1)
        radius2 = radius2 + (m / nyq) ** 2
    return mesh, np.sqrt(radius2)


def _canonical_mask(mesh: list, shape: tuple) -> np.ndarray:
    """Select one representative of each Hermitian-conjugate mode pair.

    A mode k is kept if it is lexicographically >= its negation -k (mod n
    per axis); self-conjugate modes are always kept.
    """
    flat = [m.ravel() for m in mesh]
    neg = [(-m.ravel()) % n for m, n in zip(mesh, shape)]
    pos = [m % n for m, n in zip(flat, shape)]
    keep = np.zeros(flat[0].size, dtype=bool)
    gt = np.zeros(flat[0].size, dtype=bool)
    lt = np.zeros(flat[0].size, dtype=bool)
    for p, q in zip(pos, neg):
        gt_here = (p > q) & ~lt
        lt_here = (p < q) & ~gt
        gt |= gt_here
        lt |= lt_here
    keep = gt | (~gt & ~lt)  # self-conjugate when all axes equal
    return keep.reshape(shape), (~gt & ~lt).reshape(shape)


def to_freq(
    lib: LibraryMatrix, target: np.ndarray, cutoff_fraction: float
) -> FreqSystem:
    """Transform the regression system to the frequency domain and keep
    only low-frequency modes."""
    if not 0 < cutoff_fraction <= 1:
        raise ValueError("cutoff_fraction must be in (0, 1]")
    shape = lib.block_shape
    m_rows = int(np.prod(shape))
    if lib.columns.shape[0] != m_rows:
        raise ValueError("cannot reshape for FFT: rows do not form a full block")
    mesh, radius = _mode_grid(shape)
    canon, _self = _canonical_mask(mesh, shape)
    if cutoff_fraction >= 1.0:
        keep = canon.copy()  # full spectrum, corners included
    else:
        keep = (radius <= cutoff_fraction) & canon
    keep.flat[0] = True  # zero-frequency mode always kept
    sel = keep.ravel()
    norm = np.sqrt(m_rows)  # unitary scaling so Parseval holds directly
    n_terms = lib.columns.shape[1]
    theta = np.empty((int(sel.sum()), n_terms), dtype=complex)
    for j in range(n_terms):
        theta[:, j] = (np.fft.fftn(lib.columns[:, j].reshape(shape)) / norm).ravel()[sel]
    tgt = (np.fft.fftn(target.reshape(shape)) / norm).ravel()[sel]
    kept_modes = np.stack([m.ravel()[sel] for m in mesh], axis=1)
    weights = np.where(_self.ravel()[sel], 1.0, 2.0)
    return FreqSystem(theta, tgt, kept_modes, cutoff_fraction, shape, weights)


def realify(fs: FreqSystem) -> tuple:
    """Stack real and imaginary parts of the kept modes as real rows,
    weighted so the least-squares objective matches the full complex
    system (deduplicated conjugate pairs count twice)."""
    w = np.sqrt(fs.weights)[:, None]
    theta = np.concatenate([fs.theta.real * w, fs.theta.imag * w], axis=0)
    target = np.concatenate(
        [fs.target.real * w[:, 0], fs.target.imag * w[:, 0]], axis=0
    )
    return theta, target


def parseval_gap(lib: LibraryMatrix, target: np.ndarray) -> float:
    """Relative Parseval mismatch of the target at cutoff 1 (diagnostic)."""
    fs = to_freq(lib, target, 1.0)
    freq_sq = float(np.sum(fs.weights * np.abs(fs.target) ** 2))
    real_sq = float(np.sum(target**2))
    return abs(freq_sq - real_sq) / real_sq
