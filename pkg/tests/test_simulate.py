import numpy as np
import pytest

from psipde.core import FieldTensor, Grid, SimSpec, SystemKind, field_stats
from psipde.simulate import (
    NoiseSpec,
    UnstableConfiguration,
    add_noise,
    default_grid,
    default_spec,
    rng_stream,
    simulate,
    solve_burgers1d,
    solve_burgers2d,
    solve_kdv,
)


class TestRngStream:
    def test_deterministic(self):
        a = rng_stream(7, "x").standard_normal(5)
        b = rng_stream(7, "x").standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_name_separates_streams(self):
        a = rng_stream(7, "x").standard_normal(5)
        b = rng_stream(7, "y").standard_normal(5)
        assert not np.allclose(a, b)

    def test_nested_names(self):
        a = rng_stream(7, "select.splits", "0").standard_normal(3)
        b = rng_stream(7, "select.splits", "1").standard_normal(3)
        assert not np.allclose(a, b)

    def test_seed_separates_streams(self):
        a = rng_stream(1, "x").standard_normal(5)
        b = rng_stream(2, "x").standard_normal(5)
        assert not np.allclose(a, b)


class TestBurgers1d:
    def test_initial_condition(self, burgers_clean, burgers_grid):
        np.testing.assert_allclose(
            burgers_clean.values[0], -np.sin(np.pi * burgers_grid.x), atol=1e-12
        )

    def test_dirichlet_ends_exact_zero(self, burgers_clean):
        assert np.all(burgers_clean.values[:, 0] == 0.0)
        assert np.all(burgers_clean.values[:, -1] == 0.0)

    def test_odd_symmetry(self, burgers_clean):
        # u(t, -x) = -u(t, x) for the sine IC
        v = burgers_clean.values
        np.testing.assert_allclose(v, -v[:, ::-1], atol=1e-10)

    def test_amplitude_decays(self, burgers_clean):
        # viscosity dissipates energy; max|u| never grows
        amp = np.max(np.abs(burgers_clean.values), axis=1)
        assert np.all(np.diff(amp) <= 1e-12)
        assert amp[0] == pytest.approx(1.0, abs=1e-12)

    def test_self_convergence_under_grid_halving(self, burgers_grid):
        # acceptance: < 1% RMS between internal resolutions r and r/2
        spec = SimSpec(SystemKind.BURGERS1D, burgers_grid, {"nu": 0.01 / np.pi})
        coarse = solve_burgers1d(spec, internal_resolution=1024)
        fine = solve_burgers1d(spec, internal_resolution=2048)
        rms = np.sqrt(np.mean((coarse.values - fine.values) ** 2))
        scale = np.sqrt(np.mean(fine.values**2))
        assert rms / scale < 0.01

    def test_requires_positive_viscosity(self, burgers_grid):
        with pytest.raises(ValueError):
            solve_burgers1d(SimSpec(SystemKind.BURGERS1D, burgers_grid, {"nu": -0.1}))

    def test_wrong_system_rejected(self, burgers_grid):
        spec = SimSpec(SystemKind.KDV, burgers_grid,
                       {"advection": -1.0, "dispersion": -0.0025})
        with pytest.raises(ValueError):
            solve_burgers1d(spec)


class TestKdv:
    def test_initial_condition(self, kdv_clean):
        g = kdv_clean.grid
        np.testing.assert_allclose(
            kdv_clean.values[0], np.cos(np.pi * g.x), atol=1e-12
        )

    def test_mass_conserved(self, kdv_clean):
        # integral of u over the periodic cell is invariant
        v = kdv_clean.values[:, :-1]  # drop duplicated endpoint
        mass = v.sum(axis=1) * kdv_clean.grid.dx
        assert np.max(np.abs(mass - mass[0])) < 1e-10

    def test_self_convergence(self):
        grid = Grid(-1.0, 1.0, 129, 0.0, 0.5, 51)
        spec = SimSpec(SystemKind.KDV, grid, {"advection": -1.0, "dispersion": -0.0025})
        coarse = solve_kdv(spec, internal_resolution=512)
        fine = solve_kdv(spec, internal_resolution=1024)
        rms = np.sqrt(np.mean((coarse.values - fine.values) ** 2))
        scale = np.sqrt(np.mean(fine.values**2))
        assert rms / scale < 0.01

    def test_periodic_endpoints_match(self, kdv_clean):
        np.testing.assert_array_equal(
            kdv_clean.values[:, 0], kdv_clean.values[:, -1]
        )


class TestBurgers2d:
    def test_initial_condition_peak(self, burgers2d_clean):
        # peak 0.1 sits at (0, 0), which is not a node of the even-count
        # default axis; the sampled maximum is just below 0.1
        v0 = burgers2d_clean.values[0]
        assert 0.099 < v0.max() <= 0.1

    def test_periodic_wrap(self, burgers2d_clean):
        v = burgers2d_clean.values
        np.testing.assert_array_equal(v[:, 0, :], v[:, -1, :])
        np.testing.assert_array_equal(v[:, :, 0], v[:, :, -1])

    def test_self_convergence(self):
        grid = Grid(-1.0, 1.0, 33, 0.0, 0.5, 11, y_min=-1.0, y_max=1.0, n_y=33)
        spec = SimSpec(SystemKind.BURGERS2D, grid,
                       {"advection": -1.0, "diffusion": 0.01})
        coarse = solve_burgers2d(spec, internal_resolution=96)
        fine = solve_burgers2d(spec, internal_resolution=192)
        rms = np.sqrt(np.mean((coarse.values - fine.values) ** 2))
        scale = np.sqrt(np.mean(fine.values**2))
        assert rms / scale < 0.01

    def test_requires_positive_diffusion(self):
        grid = default_grid(SystemKind.BURGERS2D)
        with pytest.raises(ValueError):
            solve_burgers2d(
                SimSpec(SystemKind.BURGERS2D, grid,
                        {"advection": -1.0, "diffusion": -0.01})
            )


class TestDispatchAndDefaults:
    def test_simulate_dispatch(self, burgers_grid):
        spec = SimSpec(SystemKind.BURGERS1D, burgers_grid, {"nu": 0.01 / np.pi})
        f = simulate(spec)
        assert f.grid == burgers_grid

    @pytest.mark.parametrize("system", list(SystemKind))
    def test_default_spec_valid(self, system):
        spec = default_spec(system)
        assert spec.system == system
        assert spec.grid == default_grid(system)


class TestNoise:
    def test_level_zero_is_identity(self, burgers_clean):
        assert add_noise(burgers_clean, NoiseSpec(0.0)) is burgers_clean

    def test_noise_ratio_matches_level(self, burgers_clean):
        noisy = add_noise(burgers_clean, NoiseSpec(0.10, seed=3))
        resid = noisy.values - burgers_clean.values
        ratio = np.std(resid) / field_stats(burgers_clean)["std"]
        assert ratio == pytest.approx(0.10, rel=0.03)

    def test_deterministic_per_seed(self, burgers_clean):
        a = add_noise(burgers_clean, NoiseSpec(0.2, seed=5))
        b = add_noise(burgers_clean, NoiseSpec(0.2, seed=5))
        c = add_noise(burgers_clean, NoiseSpec(0.2, seed=6))
        np.testing.assert_array_equal(a.values, b.values)
        assert not np.allclose(a.values, c.values)

    def test_negative_level_rejected(self):
        with pytest.raises(ValueError):
            NoiseSpec(-0.1)


class TestInstability:
    def test_blowup_reported(self):
        # negative-viscosity KdV-like setup is fine, but a huge advection
        # coefficient with long store intervals exceeds the substep budget
        grid = Grid(-1.0, 1.0, 1025, 0.0, 1.0, 8)
        spec = SimSpec(SystemKind.KDV, grid,
                       {"advection": -1e6, "dispersion": -0.0025})
        with pytest.raises(UnstableConfiguration):
            solve_kdv(spec, internal_resolution=1024)
