import math

import numpy as np
import pytest

from conftest import sine
from itm.services.geometry import (
    ScalarField, VectorField, check_same_grid, div_b_grad, face_average, face_divergence, face_gradient,
    forward_diff, fourier_multiplier, gradient, inner, l2_norm, laplacian_symbol, make_grid, sobolev_symbol,
)
from itm.utils.errors import ItmError


class TestMakeGrid:
    def test_wavenumbers_follow_fft_ordering(self):
        grid = make_grid(1, 2 * math.pi, 16)
        assert grid.h == pytest.approx(2 * math.pi / 16)
        expected = np.array([0, 1, 2, 3, 4, 5, 6, 7, -8, -7, -6, -5, -4, -3, -2, -1], dtype=float)
        np.testing.assert_allclose(grid.wavenumbers[0], expected, atol=1e-12)

    def test_two_dimensional_sizes(self):
        grid = make_grid(2, 1.0, 64)
        assert grid.h == pytest.approx(1 / 64)
        assert grid.size == 4096
        assert grid.shape == (64, 64)
        assert grid.h * grid.N == pytest.approx(grid.L)

    @pytest.mark.parametrize("d, L, N", [(1, 2 * math.pi, 12), (3, 1.0, 16), (1, 1.0, 4), (1, -1.0, 16)])
    def test_rejects_bad_grids(self, d, L, N):
        with pytest.raises(ItmError) as exc:
            make_grid(d, L, N)
        assert exc.value.code == "ITM-100"

    def test_conjugate_symmetric_table(self):
        grid = make_grid(1, 3.0, 32)
        k = grid.wavenumbers[0]
        for m in range(1, 16):
            assert k[m] == pytest.approx(-k[32 - m])


class TestFields:
    def test_nan_rejected(self, grid_2pi):
        values = np.zeros(grid_2pi.shape)
        values[3] = np.nan
        with pytest.raises(ItmError) as exc:
            ScalarField(grid_2pi, values)
        assert exc.value.code == "ITM-101"

    def test_shape_mismatch_rejected(self, grid_2pi):
        with pytest.raises(ItmError):
            ScalarField(grid_2pi, np.zeros(10))

    def test_vector_component_count(self, grid_2pi):
        with pytest.raises(ItmError):
            VectorField(grid_2pi, (np.zeros(64), np.zeros(64)))

    def test_different_grids(self, grid_2pi):
        other = make_grid(1, 2 * math.pi, 32)
        with pytest.raises(ItmError) as exc:
            check_same_grid(ScalarField(grid_2pi, np.zeros(64)), ScalarField(other, np.zeros(32)))
        assert exc.value.code == "ITM-102"


class TestGradient:
    def test_constant_has_zero_gradient(self, grid_2pi):
        g = gradient(ScalarField(grid_2pi, np.full(64, 3.5)))
        np.testing.assert_array_equal(g.components[0], 0.0)

    def test_sine_second_order(self):
        grid = make_grid(1, 2 * math.pi, 256)
        x = grid.coordinates()[0]
        g = gradient(ScalarField(grid, np.sin(x)))
        err = np.max(np.abs(g.components[0] - np.cos(x)))
        assert err <= grid.h ** 2 / 6 + 1e-12

    def test_richardson_ratio(self):
        errors = []
        for N in (64, 128):
            grid = make_grid(1, 2 * math.pi, N)
            x = grid.coordinates()[0]
            g = gradient(ScalarField(grid, np.sin(8 * x)))
            errors.append(np.max(np.abs(g.components[0] - 8 * np.cos(8 * x))))
        assert 3.8 <= errors[0] / errors[1] <= 4.2

    def test_translation_commutes(self, grid_2pi, rng):
        u = rng.standard_normal(64)
        shifted = gradient(ScalarField(grid_2pi, np.roll(u, 1))).components[0]
        np.testing.assert_array_equal(shifted, np.roll(gradient(ScalarField(grid_2pi, u)).components[0], 1))


class TestDivBGrad:
    def test_unit_coefficient_on_sine(self, grid_2pi):
        x = grid_2pi.coordinates()[0]
        one = ScalarField(grid_2pi, np.ones(64))
        lap = div_b_grad(ScalarField(grid_2pi, np.sin(x)), one)
        assert np.max(np.abs(lap.values + np.sin(x))) <= grid_2pi.h ** 2 / 10

    def test_constant_maps_to_zero(self, grid_2pi, rng):
        b = ScalarField(grid_2pi, 1 + rng.random(64))
        out = div_b_grad(ScalarField(grid_2pi, np.full(64, 2.0)), b)
        np.testing.assert_allclose(out.values, 0.0, atol=1e-12)

    def test_self_adjoint(self, rng):
        grid = make_grid(2, 5.0, 16)
        u = ScalarField(grid, rng.standard_normal(grid.shape))
        w = ScalarField(grid, rng.standard_normal(grid.shape))
        b = ScalarField(grid, 0.5 + rng.random(grid.shape))
        lhs = inner(div_b_grad(u, b), w)
        rhs = inner(u, div_b_grad(w, b))
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-9)

    def test_summation_by_parts(self, rng):
        grid = make_grid(2, 5.0, 16)
        u = ScalarField(grid, rng.standard_normal(grid.shape))
        w = ScalarField(grid, rng.standard_normal(grid.shape))
        b = 0.5 + rng.random(grid.shape)
        lhs = inner(u, div_b_grad(w, ScalarField(grid, b)))
        faces = face_average(b)
        rhs = -sum(np.sum(f * gu * gw) for f, gu, gw in
                   zip(faces, forward_diff(u.values, grid.h), forward_diff(w.values, grid.h))) * grid.cell_volume
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-9)

    def test_unit_coefficient_is_five_point_stencil(self, rng):
        grid = make_grid(2, 4.0, 16)
        u = rng.standard_normal(grid.shape)
        expected = (np.roll(u, 1, 0) + np.roll(u, -1, 0) + np.roll(u, 1, 1) + np.roll(u, -1, 1) - 4 * u) / grid.h ** 2
        out = div_b_grad(ScalarField(grid, u), ScalarField(grid, np.ones(grid.shape)))
        np.testing.assert_allclose(out.values, expected, rtol=1e-12, atol=1e-10)

    def test_staggered_pair_reproduces_stencil(self, rng):
        grid = make_grid(1, 4.0, 32)
        u = ScalarField(grid, rng.standard_normal(32))
        b = 1 + rng.random(32)
        flux = VectorField(grid, tuple(f * g for f, g in zip(face_average(b), face_gradient(u).components)))
        np.testing.assert_allclose(face_divergence(flux).values, div_b_grad(u, ScalarField(grid, b)).values,
                                   rtol=1e-12, atol=1e-9)

    def test_rejects_non_positive_coefficient(self, grid_2pi):
        b = np.ones(64)
        b[5] = 0.0
        with pytest.raises(ItmError) as exc:
            div_b_grad(ScalarField(grid_2pi, np.zeros(64)), ScalarField(grid_2pi, b))
        assert exc.value.code == "ITM-101"

    def test_masked_coefficient_allowed_when_requested(self, grid_2pi):
        b = np.ones(64)
        b[5] = 0.0
        out = div_b_grad(ScalarField(grid_2pi, np.zeros(64)), ScalarField(grid_2pi, b), nonnegative=True)
        np.testing.assert_array_equal(out.values, 0.0)


class TestFourierMultiplier:
    def test_identity(self, grid_2pi, rng):
        u = ScalarField(grid_2pi, rng.standard_normal(64))
        np.testing.assert_allclose(fourier_multiplier(u, 1.0).values, u.values, atol=1e-12)

    def test_spectral_laplacian_on_mode(self, grid_2pi):
        u = sine(grid_2pi)
        out = fourier_multiplier(u, lambda k: -np.sum(k ** 2, axis=0))
        np.testing.assert_allclose(out.values, -u.values, atol=1e-12)

    def test_composition(self, grid_2pi, rng):
        u = ScalarField(grid_2pi, rng.standard_normal(64))
        twice = fourier_multiplier(fourier_multiplier(u, sobolev_symbol(grid_2pi, -1)), sobolev_symbol(grid_2pi, -1))
        once = fourier_multiplier(u, sobolev_symbol(grid_2pi, -2))
        np.testing.assert_allclose(twice.values, once.values, atol=1e-12)

    def test_nan_symbol_rejected(self, grid_2pi):
        u = sine(grid_2pi)
        with pytest.raises(ItmError) as exc:
            fourier_multiplier(u, lambda k: np.where(k[0] == 0, np.nan, 1.0))
        assert exc.value.code == "ITM-103"

    def test_compact_symbol_matches_stencil(self, grid_2pi, rng):
        u = ScalarField(grid_2pi, rng.standard_normal(64))
        spectral = fourier_multiplier(u, laplacian_symbol(grid_2pi))
        stencil = div_b_grad(u, ScalarField(grid_2pi, np.ones(64)))
        np.testing.assert_allclose(spectral.values, stencil.values, atol=1e-9)


class TestNorms:
    def test_l2_of_constant(self, grid_2pi):
        assert l2_norm(ScalarField(grid_2pi, np.full(64, 2.0))) == pytest.approx(2.0 * math.sqrt(2 * math.pi))
