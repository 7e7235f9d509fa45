"""
Tests for the per-wavenumber elliptic solvers.

Validates:
- Helmholtz (chemical) solve against manufactured solutions, both boundary families
- stream function and velocity recovery
- LU cache behaviour, including concurrent first use
- self-adjointness and amplification of the implicit operator
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from app.elliptic import (
    EllipticSolveError,
    cache_size,
    clear_cache,
    factorization,
    helmholtz_solve,
    implicit_amplification,
    solve_chemo,
    solve_profile,
    solve_stream,
    solve_stream_velocity,
    zero_mode_velocity,
)
from app.grid import ChannelGrid, PhysField, ddx, ddy, lp_norm, profile_integral, to_spectral
from app.models import DensityBC


@pytest.fixture
def grid() -> ChannelGrid:
    return ChannelGrid(nx=16, ny=32)


class TestChemoSolve:
    """-Laplacian c + c = n with the density boundary condition."""

    @pytest.mark.parametrize("k", [0, 1, 4])
    def test_dirichlet_manufactured(self, grid, k):
        """c = cos(kx)(1 - y^2) is recovered from its right-hand side."""
        c = PhysField.from_function(grid, lambda X, Y: np.cos(k * X) * (1 - Y**2))
        n = PhysField.from_function(grid, lambda X, Y: np.cos(k * X) * (2 + (k * k + 1) * (1 - Y**2)))

        result = solve_chemo(n, DensityBC.DIRICHLET)
        np.testing.assert_allclose(result.values, c.values, atol=1e-10)

    @pytest.mark.parametrize("k", [0, 2])
    def test_neumann_manufactured(self, grid, k):
        """c = cos(kx) cos(pi y) has zero normal derivative at the walls."""
        c = PhysField.from_function(grid, lambda X, Y: np.cos(k * X) * np.cos(np.pi * Y))
        n = c * (math.pi**2 + k * k + 1)

        result = solve_chemo(n, DensityBC.NEUMANN)
        np.testing.assert_allclose(result.values, c.values, atol=1e-9)

    @pytest.mark.parametrize("level", [1.0, 0.5, 3.0])
    def test_neumann_constant_density(self, grid, level):
        """A constant density gives c = n under Neumann conditions."""
        n = PhysField.from_function(grid, lambda X, Y: level + 0 * X)

        np.testing.assert_allclose(solve_chemo(n, DensityBC.NEUMANN).values, level, atol=1e-11)

    def test_dirichlet_constant_density_vanishes_at_walls(self, grid):
        """With Dirichlet conditions c is pinned to zero at y = +-1."""
        n = PhysField.from_function(grid, lambda X, Y: 1.0 + 0 * X)
        c = solve_chemo(n, DensityBC.DIRICHLET)

        assert np.max(np.abs(c.values[:, [0, -1]])) < 1e-13
        assert c.values[:, grid.ny // 2].min() > 0.0

    def test_residual_is_small(self, rng):
        """The collocation residual stays below 1e-10 |rhs|."""
        grid = ChannelGrid(nx=16, ny=16)
        X, Y = grid.meshgrid()
        values = sum(rng.normal() * np.cos(k * X + rng.uniform(0, 6)) * np.cos(m * Y) for k in range(4) for m in range(4))
        result = helmholtz_solve(to_spectral(PhysField(grid, values)), DensityBC.NEUMANN)

        assert result.residual <= 1e-10 * result.rhs_norm


class TestStreamSolve:
    """Delta Phi = omega with Phi(+-1) = 0, u = (dPhi/dy, -dPhi/dx)."""

    @pytest.mark.parametrize("k", [1, 2])
    def test_manufactured_stream(self, k):
        """Phi = sin(kx)(1 - y^2) and its velocity are recovered."""
        grid = ChannelGrid(nx=16, ny=16)
        X, Y = grid.meshgrid()
        omega = PhysField(grid, np.sin(k * X) * (-2 - k * k * (1 - Y**2)))

        phi, u1, u2 = solve_stream_velocity(omega)
        np.testing.assert_allclose(phi.values, np.sin(k * X) * (1 - Y**2), atol=1e-11)
        np.testing.assert_allclose(u1.values, -2 * Y * np.sin(k * X), atol=1e-10)
        np.testing.assert_allclose(u2.values, -k * np.cos(k * X) * (1 - Y**2), atol=1e-10)

    def test_zero_mode_is_ignored(self):
        """An x-independent vorticity carries no non-zero-mode velocity."""
        grid = ChannelGrid(nx=16, ny=16)
        omega = PhysField.from_function(grid, lambda X, Y: np.sin(np.pi * Y) + 0 * X)

        phi, u1, u2 = solve_stream_velocity(omega)
        assert phi.max_abs() < 1e-13
        assert u1.max_abs() < 1e-13
        assert u2.max_abs() < 1e-13

    def test_velocity_is_divergence_free(self):
        """du1/dx + du2/dy = 0 up to round-off."""
        grid = ChannelGrid(nx=16, ny=16)
        X, Y = grid.meshgrid()
        omega = PhysField(grid, np.cos(2 * X + 0.3) * np.sin(np.pi * Y) + 0.5 * np.sin(X) * np.sin(2 * np.pi * Y))
        result = solve_stream(to_spectral(omega))
        u1, u2 = result.velocity

        assert (ddx(u1) + ddy(u2)).max_abs() < 1e-10
        assert math.isfinite(result.curvature_residual)

    def test_zero_mode_velocity_embeds_profile(self):
        """u01 becomes an x-independent field; the length is checked."""
        grid = ChannelGrid(nx=16, ny=16)
        profile = np.cos(np.pi * grid.y)
        u = zero_mode_velocity(grid, profile)

        np.testing.assert_array_equal(u.values[5], profile)
        with pytest.raises(EllipticSolveError):
            zero_mode_velocity(grid, profile[:-1])


class TestFactorizationCache:
    """LU factors are built once per (grid, k, bc, shift, scale)."""

    def test_reuse_and_clear(self):
        """A second request returns the cached object; clear_cache empties it."""
        grid = ChannelGrid(nx=8, ny=12)
        clear_cache()
        first = factorization(grid, 3, DensityBC.DIRICHLET, 1.0, 0.1)
        second = factorization(grid, -3, DensityBC.DIRICHLET, 1.0, 0.1)

        assert first is second
        assert cache_size() == 1
        clear_cache()
        assert cache_size() == 0

    def test_concurrent_first_use(self):
        """Threads racing on a cold cache all see one factorization."""
        grid = ChannelGrid(nx=8, ny=20)
        clear_cache()
        with ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(lambda _: factorization(grid, 2, DensityBC.NEUMANN, 1.5, 0.01), range(32)))

        assert all(item is results[0] for item in results)

    def test_singular_operator_is_reported(self):
        """The pure Neumann Laplacian at k = 0 has no unique solution."""
        grid = ChannelGrid(nx=8, ny=12)

        with pytest.raises(EllipticSolveError):
            factorization(grid, 0, DensityBC.NEUMANN, shift=0.0, scale=1.0)


class TestOperatorProperties:
    """Structural properties of the implicit operator."""

    @pytest.mark.parametrize("bc", [DensityBC.DIRICHLET, DensityBC.NEUMANN])
    def test_inverse_is_self_adjoint(self, bc):
        """<G f, g> = <f, G g> for G = (-d_yy + k^2 + 1)^{-1}."""
        grid = ChannelGrid(nx=8, ny=32)
        y = grid.y
        f = np.exp(y)
        g = np.cos(2 * y) + y**3
        Gf = solve_profile(grid, f, 2, bc)
        Gg = solve_profile(grid, g, 2, bc)

        lhs = profile_integral(grid, Gf * g)
        rhs = profile_integral(grid, f * Gg)
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)

    @pytest.mark.parametrize("bc", [DensityBC.DIRICHLET, DensityBC.NEUMANN])
    @pytest.mark.parametrize("k", [0, 1, 3])
    def test_implicit_step_does_not_amplify(self, bc, k):
        """Every finite eigenvalue of one implicit diffusion step has modulus <= 1."""
        grid = ChannelGrid(nx=8, ny=16)
        factors = implicit_amplification(grid, k, bc, scale=0.1)

        assert factors.size > 0
        assert np.all(np.abs(factors) <= 1.0 + 1e-10)

    def test_solution_norm_is_bounded_by_rhs(self, grid):
        """Energy estimate |c| <= |n| for the Helmholtz solve."""
        n = PhysField.from_function(grid, lambda X, Y: np.exp(-((X - 3) ** 2) - 4 * Y**2))
        c = solve_chemo(n, DensityBC.NEUMANN)

        assert lp_norm(c, 2) <= lp_norm(n, 2)
