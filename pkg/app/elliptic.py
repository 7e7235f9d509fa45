from __future__ import annotations

"""
Per-wavenumber boundary-value solves on the Chebyshev collocation grid.

Every solve has the shape (shift * I - scale * (D2 - k^2 I)) q = rhs with the
first and last rows replaced by the boundary condition. Factorizations are
cached per (grid, |k|, bc, shift, scale).
"""

import logging
import threading
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigvals, lu_factor, lu_solve

from .grid import (
    ChannelGrid,
    ModeStack,
    PhysField,
    ddx_spectral,
    ddy_spectral,
    spectral_l2_squared,
    to_physical,
    to_spectral,
)
from .models import DensityBC

logger = logging.getLogger(__name__)

RESIDUAL_TOLERANCE = 1e-10
CURVATURE_TOLERANCE = 1e-8


class EllipticSolveError(Exception):
    """Raised when a collocation system is singular or yields non-finite values."""


@dataclass(frozen=True)
class Factorization:
    matrix: np.ndarray
    lu: tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class HelmholtzSolve:
    rhs: ModeStack
    solution: ModeStack
    residual: float

    @property
    def rhs_norm(self) -> float:
        return float(np.sqrt(spectral_l2_squared(self.rhs)))


@dataclass(frozen=True)
class StreamSolve:
    vorticity: ModeStack
    stream: ModeStack
    velocity: tuple[PhysField, PhysField]
    curvature_residual: float


_CACHE: dict[tuple, Factorization] = {}
_CACHE_LOCK = threading.Lock()


# Public API ------------------------------------------------------------------
def factorization(
    grid: ChannelGrid,
    k: int,
    bc: DensityBC,
    shift: float = 1.0,
    scale: float = 1.0,
) -> Factorization:
    key = (grid, abs(int(k)), DensityBC(bc), float(shift), float(scale))
    cached = _CACHE.get(key)
    if cached is not None:
        return cached

    with _CACHE_LOCK:
        cached = _CACHE.get(key)
        if cached is not None:
            return cached
        matrix = operator_matrix(grid, k, bc, shift, scale)
        lu, piv = lu_factor(matrix, check_finite=True)
        pivots = np.abs(np.diag(lu))
        if not np.all(np.isfinite(pivots)) or pivots.min() <= 1e-14 * pivots.max():
            raise EllipticSolveError(
                f"特異な選点行列です (k={k}, bc={DensityBC(bc).value}, shift={shift}, scale={scale})"
            )
        cached = Factorization(matrix=matrix, lu=(lu, piv))
        _CACHE[key] = cached
    return cached


def clear_cache() -> None:
    with _CACHE_LOCK:
        _CACHE.clear()


def cache_size() -> int:
    return len(_CACHE)


def operator_matrix(
    grid: ChannelGrid,
    k: int,
    bc: DensityBC,
    shift: float = 1.0,
    scale: float = 1.0,
) -> np.ndarray:
    n = grid.ny + 1
    identity = np.eye(n)
    matrix = shift * identity - scale * (grid.D2 - (k * k) * identity)
    if DensityBC(bc) is DensityBC.DIRICHLET:
        matrix[0, :] = identity[0]
        matrix[-1, :] = identity[-1]
    else:
        matrix[0, :] = grid.D1[0]
        matrix[-1, :] = grid.D1[-1]
    return matrix


def solve_profile(
    grid: ChannelGrid,
    rhs: np.ndarray,
    k: int,
    bc: DensityBC,
    shift: float = 1.0,
    scale: float = 1.0,
) -> np.ndarray:
    """Solve one profile; the boundary entries of rhs are replaced by homogeneous data."""

    fac = factorization(grid, k, bc, shift, scale)
    b = np.array(rhs, dtype=complex)
    b[0] = 0.0
    b[-1] = 0.0
    # 実 LU を使うので実部と虚部を 2 列の右辺として同時に解く
    sol = lu_solve(fac.lu, np.column_stack([b.real, b.imag]))
    if not np.all(np.isfinite(sol)):
        raise EllipticSolveError(f"非有限の解が得られました (k={k})")
    return sol[:, 0] + 1j * sol[:, 1]


def solve_modes(
    m: ModeStack,
    bc: DensityBC,
    shift: float = 1.0,
    scale: float = 1.0,
    skip_zero: bool = False,
) -> ModeStack:
    grid = m.grid
    out = np.zeros_like(m.profiles)
    for k in grid.wavenumbers:
        if skip_zero and k == 0:
            continue
        out[k] = solve_profile(grid, m.profiles[k], int(k), bc, shift, scale)
    return ModeStack(grid, out)


def helmholtz_solve(rhs: ModeStack, bc: DensityBC) -> HelmholtzSolve:
    """Solve -(c'' - k^2 c) + c = rhs for every k with the density boundary condition."""

    solution = solve_modes(rhs, bc, shift=1.0, scale=1.0)
    residual = _residual_norm(rhs, solution, bc, shift=1.0, scale=1.0)
    result = HelmholtzSolve(rhs=rhs, solution=solution, residual=residual)
    if residual > RESIDUAL_TOLERANCE * max(result.rhs_norm, np.finfo(float).tiny):
        logger.debug("Helmholtz residual %.3e exceeds %.1e * |rhs|", residual, RESIDUAL_TOLERANCE)
    return result


def solve_chemo(n_total: PhysField, bc: DensityBC) -> PhysField:
    return to_physical(helmholtz_solve(to_spectral(n_total), bc).solution)


def solve_stream(omega: ModeStack) -> StreamSolve:
    """Phi'' - k^2 Phi = omega_k, Phi(+-1) = 0 for k != 0; u = (dPhi/dy, -dPhi/dx)."""

    grid = omega.grid
    stream = solve_modes(omega, DensityBC.DIRICHLET, shift=0.0, scale=-1.0, skip_zero=True)
    profiles = stream.profiles.copy()
    # Nyquist モードは速度に寄与させない
    profiles[-1] = 0.0
    stream = ModeStack(grid, profiles)
    u1 = to_physical(ddy_spectral(stream))
    u2 = to_physical(ddx_spectral(stream) * -1.0)

    curvature = (stream.profiles @ grid.D2.T)[1:, [0, -1]]
    curvature_residual = float(np.max(np.abs(curvature))) if curvature.size else 0.0
    scale = max(float(np.max(np.abs(omega.profiles[1:]))), 1.0)
    if curvature_residual > CURVATURE_TOLERANCE * scale:
        logger.debug("stream curvature at walls %.3e (omega scale %.3e)", curvature_residual, scale)
    return StreamSolve(vorticity=omega, stream=stream, velocity=(u1, u2), curvature_residual=curvature_residual)


def solve_stream_velocity(omega: PhysField) -> tuple[PhysField, PhysField, PhysField]:
    result = solve_stream(to_spectral(omega))
    u1, u2 = result.velocity
    return to_physical(result.stream), u1, u2


def zero_mode_velocity(grid: ChannelGrid, u01: np.ndarray) -> PhysField:
    """Embed the mean-flow profile as the x-independent u^1_0; u^2_0 is identically zero."""

    profile = np.asarray(u01, dtype=float)
    if profile.shape != (grid.ny + 1,):
        raise EllipticSolveError(f"u01 の長さ {profile.shape} が ny+1 と一致しません")
    if not np.all(np.isfinite(profile)):
        raise EllipticSolveError("u01 に非有限値が含まれています")
    return PhysField.from_profile(grid, profile)


def implicit_amplification(
    grid: ChannelGrid,
    k: int,
    bc: DensityBC,
    scale: float,
    shift: float = 1.0,
) -> np.ndarray:
    """Finite amplification factors of one implicit step for mode k."""

    fac = factorization(grid, k, bc, shift, scale)
    mass = np.eye(grid.ny + 1)
    mass[0, 0] = 0.0
    mass[-1, -1] = 0.0
    factors = eigvals(mass, fac.matrix)
    return factors[np.isfinite(factors)]


# Internal helpers ------------------------------------------------------------
def _residual_norm(rhs: ModeStack, solution: ModeStack, bc: DensityBC, shift: float, scale: float) -> float:
    grid = rhs.grid
    residual = np.zeros_like(rhs.profiles)
    for k in grid.wavenumbers:
        fac = factorization(grid, int(k), bc, shift, scale)
        target = rhs.profiles[k].copy()
        target[0] = 0.0
        target[-1] = 0.0
        residual[k] = fac.matrix @ solution.profiles[k] - target
    return float(np.sqrt(spectral_l2_squared(ModeStack(grid, residual))))
