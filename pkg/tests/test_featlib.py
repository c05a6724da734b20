import numpy as np
import pytest

from psipde.core import FieldTensor, Grid
from psipde.featlib import (
    SG_DEGREE,
    SG_WINDOW,
    DiffScheme,
    LibrarySpec,
    build_library,
    build_library_2d,
    differentiate,
    library_terms,
    parse_label,
    term_label,
)

EXPECTED_1D_LABELS = [
    "1", "u", "u^2", "u^3",
    "u_x", "u*u_x", "u^2*u_x", "u^3*u_x",
    "u_xx", "u*u_xx", "u^2*u_xx", "u^3*u_xx",
    "u_xxx", "u*u_xxx", "u^2*u_xxx", "u^3*u_xxx",
]

EXPECTED_2D_LABELS = [
    "1", "u", "u^2", "u^3",
    "(u_x+u_y)", "u*(u_x+u_y)", "u^2*(u_x+u_y)",
    "(u_xx+u_yy)", "u*(u_xx+u_yy)", "u^2*(u_xx+u_yy)",
]


def _sine_field(n_x=256, n_t=64, k=3.0):
    g = Grid(0.0, 2 * np.pi, n_x, 0.0, 1.0, n_t)
    X = g.x[None, :]
    T = g.t[:, None]
    return g, FieldTensor(g, np.sin(k * X) * np.exp(-T))


class TestDerivativeOracles:
    """Analytic derivatives of sin(kx)·exp(-t) as the oracle."""

    @pytest.mark.parametrize("order", [2, 4])
    def test_central_fd_interior(self, order):
        k = 3.0
        g, f = _sine_field(k=k)
        d = differentiate(f, DiffScheme.CENTRAL_FD, order)
        X, T = g.x[None, :], g.t[:, None]
        inner = (slice(4, -4), slice(4, -4))
        tol = 5e-3 if order == 2 else 5e-5
        np.testing.assert_allclose(
            d.u_x[inner], (k * np.cos(k * X) * np.exp(-T))[inner], atol=tol
        )
        np.testing.assert_allclose(
            d.u_xx[inner], (-(k**2) * np.sin(k * X) * np.exp(-T))[inner],
            atol=tol * k**2,
        )
        np.testing.assert_allclose(
            d.u_xxx[inner], (-(k**3) * np.cos(k * X) * np.exp(-T))[inner],
            atol=tol * k**3,
        )
        np.testing.assert_allclose(
            d.u_t[inner], (-np.sin(k * X) * np.exp(-T))[inner], atol=5e-4
        )

    def test_poly_interp_matches_analytic(self):
        k = 3.0
        g, f = _sine_field(k=k)
        d = differentiate(f, DiffScheme.POLY_INTERP)
        X, T = g.x[None, :], g.t[:, None]
        inner = (slice(5, -5), slice(5, -5))
        np.testing.assert_allclose(
            d.u_x[inner], (k * np.cos(k * X) * np.exp(-T))[inner], atol=1e-4
        )
        np.testing.assert_allclose(
            d.u_xxx[inner], (-(k**3) * np.cos(k * X) * np.exp(-T))[inner], atol=0.2
        )

    def test_odd_derivative_sign(self):
        # u = x^2 on a coarse ramp: u_x must be +2x, not -2x (stencil
        # orientation regression guard)
        g = Grid(-1.0, 1.0, 33, 0.0, 1.0, 9)
        X = g.x[None, :]
        f = FieldTensor(g, np.broadcast_to(X**2, g.shape).copy())
        d = differentiate(f, DiffScheme.CENTRAL_FD, 2)
        expected = np.broadcast_to(2 * g.x[None, 5:-5], d.u_x[:, 5:-5].shape)
        np.testing.assert_allclose(d.u_x[:, 5:-5], expected, atol=1e-10)

    def test_2d_derivatives(self):
        g = Grid(0.0, 2 * np.pi, 64, 0.0, 1.0, 16, y_min=0.0, y_max=2 * np.pi, n_y=64)
        X = g.x[None, :, None]
        Y = g.y[None, None, :]
        T = g.t[:, None, None]
        f = FieldTensor(g, np.sin(X) * np.cos(2 * Y) * (1 + T))
        d = differentiate(f, DiffScheme.CENTRAL_FD, 4)
        inner = (slice(3, -3),) * 3
        np.testing.assert_allclose(
            d.u_x[inner], (np.cos(X) * np.cos(2 * Y) * (1 + T))[inner], atol=1e-3
        )
        np.testing.assert_allclose(
            d.u_y[inner], (-2 * np.sin(X) * np.sin(2 * Y) * (1 + T))[inner], atol=1e-3
        )
        np.testing.assert_allclose(
            d.u_yy[inner], (-4 * np.sin(X) * np.cos(2 * Y) * (1 + T))[inner], atol=1e-2
        )
        assert d.u_xxx is None

    def test_grid_too_small(self):
        g = Grid(-1.0, 1.0, 8, 0.0, 1.0, 8)
        f = FieldTensor(g, np.zeros(g.shape))
        with pytest.raises(ValueError):
            differentiate(f, DiffScheme.POLY_INTERP)  # needs 9-point window

    def test_bad_stencil_order(self, burgers_clean):
        with pytest.raises(ValueError):
            differentiate(burgers_clean, DiffScheme.CENTRAL_FD, 3)


class TestLabels:
    def test_term_label_examples(self):
        assert term_label(0, (0,)) == "1"
        assert term_label(2, (0,)) == "u^2"
        assert term_label(1, (1,)) == "u*u_x"
        assert term_label(0, (3,)) == "u_xxx"
        assert term_label(3, (2,)) == "u^3*u_xx"

    @pytest.mark.parametrize("label", EXPECTED_1D_LABELS)
    def test_round_trip_1d(self, label):
        p, deriv, grouped = parse_label(label)
        assert not grouped
        assert term_label(p, deriv) == label

    @pytest.mark.parametrize("label", EXPECTED_2D_LABELS[4:])
    def test_parse_grouped(self, label):
        p, deriv, grouped = parse_label(label)
        assert grouped
        assert deriv in {(1, 0), (2, 0)}

    @pytest.mark.parametrize("bad", ["v", "u_", "u^", "2u", "u_z", ""])
    def test_parse_rejects_garbage(self, bad):
        with pytest.raises(ValueError):
            parse_label(bad)


class TestLibrary:
    def test_1d_ordering_frozen(self, burgers_clean):
        d = differentiate(burgers_clean, DiffScheme.CENTRAL_FD, 2)
        lib, target = build_library(burgers_clean, d)
        assert lib.labels() == EXPECTED_1D_LABELS
        assert [t.index for t in lib.terms] == list(range(1, 17))

    def test_rows_form_full_block(self, burgers_clean):
        d = differentiate(burgers_clean, DiffScheme.CENTRAL_FD, 2)
        lib, target = build_library(burgers_clean, d)
        assert lib.columns.shape[0] == np.prod(lib.block_shape)
        assert target.shape == (lib.columns.shape[0],)
        # constant column is exactly ones
        np.testing.assert_array_equal(lib.columns[:, 0], 1.0)

    def test_power_columns_consistent(self, burgers_clean):
        d = differentiate(burgers_clean, DiffScheme.CENTRAL_FD, 2)
        lib, _ = build_library(burgers_clean, d)
        u = lib.columns[:, 1]
        np.testing.assert_allclose(lib.columns[:, 2], u**2, rtol=1e-12)
        np.testing.assert_allclose(lib.columns[:, 5], u * lib.columns[:, 4], rtol=1e-12)

    def test_2d_ordering_frozen(self, burgers2d_clean):
        d = differentiate(burgers2d_clean, DiffScheme.CENTRAL_FD, 2)
        lib, _ = build_library_2d(burgers2d_clean, d)
        assert lib.labels() == EXPECTED_2D_LABELS
        grouped = [t for t in lib.terms if t.grouped]
        assert [t.index for t in grouped] == [5, 6, 7, 8, 9, 10]

    def test_library_terms_matches_build(self, burgers_clean, burgers2d_clean):
        d1 = differentiate(burgers_clean, DiffScheme.CENTRAL_FD, 2)
        lib1, _ = build_library(burgers_clean, d1)
        assert [t.label for t in library_terms(1)] == lib1.labels()
        d2 = differentiate(burgers2d_clean, DiffScheme.CENTRAL_FD, 2)
        lib2, _ = build_library_2d(burgers2d_clean, d2)
        assert [t.label for t in library_terms(2)] == lib2.labels()

    def test_wrong_dimension_rejected(self, burgers_clean, burgers2d_clean):
        d1 = differentiate(burgers_clean, DiffScheme.CENTRAL_FD, 2)
        with pytest.raises(ValueError):
            build_library_2d(burgers_clean, d1)
        d2 = differentiate(burgers2d_clean, DiffScheme.CENTRAL_FD, 2)
        with pytest.raises(ValueError):
            build_library(burgers2d_clean, d2)


class TestGroundTruthRegression:
    def test_clean_burgers_ls_on_resolved_grid(self):
        # on a shock-resolving grid the plain least-squares fit over the
        # true support recovers the coefficients within 5%
        from psipde.core import SimSpec, SystemKind
        from psipde.simulate import simulate

        g = Grid(-1.0, 1.0, 1025, 0.0, 1.0, 401)
        nu = 0.01 / np.pi
        f = simulate(SimSpec(SystemKind.BURGERS1D, g, {"nu": nu}))
        d = differentiate(f, DiffScheme.CENTRAL_FD, 4)
        lib, target = build_library(f, d)
        A = lib.columns[:, [5, 8]]  # u*u_x, u_xx
        xi, *_ = np.linalg.lstsq(A, target, rcond=None)
        assert xi[0] == pytest.approx(-1.0, rel=0.05)
        assert xi[1] == pytest.approx(nu, rel=0.05)
        resid = target - A @ xi
        assert np.sqrt(np.mean(resid**2)) / np.sqrt(np.mean(target**2)) < 1e-2
