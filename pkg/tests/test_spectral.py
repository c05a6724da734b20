import numpy as np
import pytest

from psipde.featlib import DiffScheme, build_library, build_library_2d, differentiate
from psipde.spectral import FreqSystem, parseval_gap, realify, to_freq


@pytest.fixture(scope="module")
def burgers_system(burgers_clean):
    d = differentiate(burgers_clean, DiffScheme.CENTRAL_FD, 2)
    return build_library(burgers_clean, d)


class TestToFreq:
    def test_cutoff_bounds(self, burgers_system):
        lib, target = burgers_system
        with pytest.raises(ValueError):
            to_freq(lib, target, 0.0)
        with pytest.raises(ValueError):
            to_freq(lib, target, 1.5)

    def test_row_count_monotone_in_cutoff(self, burgers_system):
        lib, target = burgers_system
        rows = [to_freq(lib, target, c).theta.shape[0] for c in (0.1, 0.2, 0.5, 1.0)]
        assert rows == sorted(rows)
        # full spectrum keeps about half the modes (Hermitian dedup)
        m = lib.columns.shape[0]
        assert rows[-1] == pytest.approx(m / 2, rel=0.01)

    def test_zero_mode_always_kept(self, burgers_system):
        lib, target = burgers_system
        fs = to_freq(lib, target, 0.05)
        assert any(np.all(km == 0) for km in fs.kept_modes)

    def test_kept_modes_within_cutoff(self, burgers_system):
        lib, target = burgers_system
        cutoff = 0.3
        fs = to_freq(lib, target, cutoff)
        nyq = [max(n // 2, 1) for n in fs.block_shape]
        radii = np.sqrt(np.sum((fs.kept_modes / nyq) ** 2, axis=1))
        assert np.all(radii[1:] <= cutoff + 1e-12) or np.all(
            radii[np.any(fs.kept_modes != 0, axis=1)] <= cutoff + 1e-12
        )

    def test_no_conjugate_pairs_kept(self, burgers_system):
        lib, target = burgers_system
        fs = to_freq(lib, target, 0.3)
        seen = {tuple(km % n for km, n in zip(row, fs.block_shape)) for row in fs.kept_modes}
        for row in fs.kept_modes:
            neg = tuple((-k) % n for k, n in zip(row, fs.block_shape))
            pos = tuple(k % n for k, n in zip(row, fs.block_shape))
            if neg != pos:  # not self-conjugate
                assert neg not in seen

    def test_weights_two_for_paired_modes(self, burgers_system):
        lib, target = burgers_system
        fs = to_freq(lib, target, 0.3)
        assert set(np.unique(fs.weights)) <= {1.0, 2.0}
        # the zero mode is self-conjugate
        zero_row = np.flatnonzero(np.all(fs.kept_modes == 0, axis=1))[0]
        assert fs.weights[zero_row] == 1.0

    def test_linear_in_columns(self, burgers_system):
        # the transform of a linear combination is the combination of
        # transforms (regression stays linear in the coefficients)
        lib, target = burgers_system
        fs = to_freq(lib, target, 0.4)
        combo = lib.columns @ np.arange(1.0, lib.n_terms + 1)
        fs2 = to_freq(lib, combo, 0.4)
        np.testing.assert_allclose(
            fs2.target, fs.theta @ np.arange(1.0, lib.n_terms + 1), rtol=1e-10, atol=1e-12
        )


class TestParseval:
    def test_target_energy_preserved(self, burgers_system):
        lib, target = burgers_system
        assert parseval_gap(lib, target) < 1e-9

    def test_2d_target_energy_preserved(self, burgers2d_clean):
        d = differentiate(burgers2d_clean, DiffScheme.CENTRAL_FD, 2)
        lib, target = build_library_2d(burgers2d_clean, d)
        assert parseval_gap(lib, target) < 1e-9


class TestRealify:
    def test_full_spectrum_ls_matches_real_ls(self, burgers_system):
        # least squares on the realified full-spectrum system equals least
        # squares on the original real rows (unitary transform)
        lib, target = burgers_system
        cols = [5, 8]  # u*u_x, u_xx
        fs = to_freq(lib, target, 1.0)
        theta_f, b_f = realify(fs)
        xi_f, *_ = np.linalg.lstsq(theta_f[:, cols], b_f, rcond=None)
        xi_r, *_ = np.linalg.lstsq(lib.columns[:, cols], target, rcond=None)
        np.testing.assert_allclose(xi_f, xi_r, rtol=1e-8)

    def test_residual_norm_preserved(self, burgers_system):
        lib, target = burgers_system
        fs = to_freq(lib, target, 1.0)
        theta_f, b_f = realify(fs)
        xi = np.zeros(lib.n_terms)
        xi[5] = -1.0
        r_real = np.linalg.norm(target - lib.columns @ xi)
        r_freq = np.linalg.norm(b_f - theta_f @ xi)
        assert r_freq == pytest.approx(r_real, rel=1e-10)

    def test_shapes(self, burgers_system):
        lib, target = burgers_system
        fs = to_freq(lib, target, 0.3)
        theta_f, b_f = realify(fs)
        assert theta_f.shape == (2 * fs.theta.shape[0], lib.n_terms)
        assert b_f.shape == (2 * fs.theta.shape[0],)
        assert theta_f.dtype == float


class TestLowPassDenoising:
    def test_low_modes_suppress_noise(self, burgers_clean):
        # the low-pass system of a noisy field is closer to the clean one
        # than the raw real-space system is
        from psipde.simulate import NoiseSpec, add_noise

        noisy = add_noise(burgers_clean, NoiseSpec(0.5, seed=11))
        d_c = differentiate(burgers_clean, DiffScheme.CENTRAL_FD, 2)
        d_n = differentiate(noisy, DiffScheme.CENTRAL_FD, 2)
        lib_c, t_c = build_library(burgers_clean, d_c)
        lib_n, t_n = build_library(noisy, d_n)
        fs_c = to_freq(lib_c, t_c, 0.2)
        fs_n = to_freq(lib_n, t_n, 0.2)
        rel_low = np.linalg.norm(fs_n.target - fs_c.target) / np.linalg.norm(fs_c.target)
        rel_full = np.linalg.norm(t_n - t_c) / np.linalg.norm(t_c)
        assert rel_low < rel_full
