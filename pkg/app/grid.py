from __future__ import annotations

"""
Fourier x Chebyshev discretization of the channel T x [-1, 1].

Fields are stored as real arrays indexed (x-node, y-node). Spectral data keep
only the k >= 0 profiles of the real FFT; negative wavenumbers are implied by
conjugate symmetry.
"""

import csv
import logging
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Union

import numpy as np
from scipy import fft

logger = logging.getLogger(__name__)

DOMAIN_LENGTH = 2.0 * np.pi
CHANNEL_AREA = 2.0 * DOMAIN_LENGTH

BINARY_MAGIC = b"PKSFIELD"
_BINARY_HEADER = struct.Struct("<8sqqq")
FLAG_DEALIAS = 1

Norm = Union[int, float, str]


class GridError(Exception):
    """Base class for discretization and field errors."""


class BlowUpDataError(GridError):
    """Raised when a field carries NaN or Inf into a spectral transform."""


class FieldFormatError(GridError):
    """Raised when a serialized field block cannot be parsed."""


# Chebyshev building blocks -------------------------------------------------
def chebyshev_points(ny: int) -> np.ndarray:
    """Gauss-Lobatto points y_j = cos(pi j / ny), written so that y_{ny-j} = -y_j exactly."""

    j = np.arange(ny + 1)
    return np.sin(np.pi * (ny - 2 * j) / (2.0 * ny))


def chebyshev_diff_matrix(ny: int) -> np.ndarray:
    """First-derivative collocation matrix on the Gauss-Lobatto points."""

    j = np.arange(ny + 1)
    theta = np.pi * j / ny
    c = np.ones(ny + 1)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** j
    # y_i - y_j を三角関数の積で計算して桁落ちを避ける
    diff = 2.0 * np.sin(0.5 * (theta[:, None] + theta[None, :])) * np.sin(0.5 * (theta[None, :] - theta[:, None]))
    np.fill_diagonal(diff, 1.0)
    D = np.outer(c, 1.0 / c) / diff
    np.fill_diagonal(D, 0.0)
    # 対角は負の行和（定数の微分が厳密に 0 になる）
    D[np.diag_indices_from(D)] = -D.sum(axis=1)
    return D


def clenshaw_curtis_weights(ny: int) -> np.ndarray:
    """Clenshaw-Curtis weights on the Gauss-Lobatto points; they sum to 2."""

    theta = np.pi * np.arange(ny + 1) / ny
    w = np.zeros(ny + 1)
    inner = np.arange(1, ny)
    v = np.ones(ny - 1)
    if ny % 2 == 0:
        w[0] = w[ny] = 1.0 / (ny**2 - 1)
        for k in range(1, ny // 2):
            v -= 2.0 * np.cos(2 * k * theta[inner]) / (4 * k * k - 1)
        v -= np.cos(ny * theta[inner]) / (ny**2 - 1)
    else:
        w[0] = w[ny] = 1.0 / ny**2
        for k in range(1, (ny - 1) // 2 + 1):
            v -= 2.0 * np.cos(2 * k * theta[inner]) / (4 * k * k - 1)
    w[inner] = 2.0 * v / ny
    return w


# Grid ------------------------------------------------------------------------
@dataclass(frozen=True)
class ChannelGrid:
    """Immutable Fourier x Chebyshev grid; safe to share across threads."""

    nx: int
    ny: int
    dealias: bool = True

    def __post_init__(self) -> None:
        if self.nx < 8 or self.nx % 2:
            raise GridError(f"nx は 8 以上の偶数である必要があります: {self.nx}")
        if self.ny < 8:
            raise GridError(f"ny は 8 以上である必要があります: {self.ny}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny + 1)

    @property
    def n_modes(self) -> int:
        return self.nx // 2 + 1

    @cached_property
    def x(self) -> np.ndarray:
        return DOMAIN_LENGTH * np.arange(self.nx) / self.nx

    @cached_property
    def y(self) -> np.ndarray:
        return chebyshev_points(self.ny)

    @property
    def dx(self) -> float:
        return DOMAIN_LENGTH / self.nx

    @cached_property
    def dy_min(self) -> float:
        return float(self.y[0] - self.y[1])

    @cached_property
    def dy_max(self) -> float:
        return float(np.max(-np.diff(self.y)))

    @cached_property
    def D1(self) -> np.ndarray:
        return chebyshev_diff_matrix(self.ny)

    @cached_property
    def D2(self) -> np.ndarray:
        return self.D1 @ self.D1

    @cached_property
    def weights(self) -> np.ndarray:
        """Clenshaw-Curtis weights in y."""

        return clenshaw_curtis_weights(self.ny)

    @cached_property
    def quadrature(self) -> np.ndarray:
        """2-D quadrature weights, uniform in x and Clenshaw-Curtis in y."""

        return np.broadcast_to(self.dx * self.weights, self.shape)

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        return np.arange(self.n_modes)

    @cached_property
    def mode_weights(self) -> np.ndarray:
        # 実数場の片側スペクトルで ±k をまとめて数えるための重み
        weights = np.full(self.n_modes, 2.0)
        weights[0] = 1.0
        weights[-1] = 1.0
        return weights

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        if not self.dealias:
            return np.ones(self.n_modes, dtype=bool)
        return self.wavenumbers <= self.nx // 3

    @cached_property
    def shear_profile(self) -> np.ndarray:
        return 1.0 - self.y**2

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.y, indexing="ij")


# Fields ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class PhysField:
    """A real scalar field on the grid, values indexed (x-node, y-node)."""

    grid: ChannelGrid
    values: np.ndarray

    # ndarray * PhysField を PhysField.__rmul__ に委ねる
    __array_ufunc__ = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise GridError(f"場の形状 {values.shape} が格子 {self.grid.shape} と一致しません")
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: ChannelGrid) -> "PhysField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid: ChannelGrid, func: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "PhysField":
        X, Y = grid.meshgrid()
        return cls(grid, np.broadcast_to(func(X, Y), grid.shape).copy())

    @classmethod
    def from_profile(cls, grid: ChannelGrid, profile: np.ndarray) -> "PhysField":
        profile = np.asarray(profile, dtype=float)
        return cls(grid, np.broadcast_to(profile, grid.shape).copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def _coerce(self, other) -> np.ndarray | float:
        if isinstance(other, PhysField):
            if other.grid != self.grid:
                raise GridError("異なる格子上の場は演算できません")
            return other.values
        return other

    def __add__(self, other) -> "PhysField":
        return PhysField(self.grid, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other) -> "PhysField":
        return PhysField(self.grid, self.values - self._coerce(other))

    def __rsub__(self, other) -> "PhysField":
        return PhysField(self.grid, self._coerce(other) - self.values)

    def __mul__(self, other) -> "PhysField":
        return PhysField(self.grid, self.values * self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "PhysField":
        return PhysField(self.grid, self.values / self._coerce(other))

    def __neg__(self) -> "PhysField":
        return PhysField(self.grid, -self.values)


@dataclass(frozen=True, eq=False)
class ModeStack:
    """Per-wavenumber complex y-profiles for k = 0..nx/2 (rows)."""

    grid: ChannelGrid
    profiles: np.ndarray

    __array_ufunc__ = None

    def __post_init__(self) -> None:
        profiles = np.asarray(self.profiles, dtype=complex)
        expected = (self.grid.n_modes, self.grid.ny + 1)
        if profiles.shape != expected:
            raise GridError(f"モード配列の形状 {profiles.shape} が {expected} と一致しません")
        object.__setattr__(self, "profiles", profiles)

    @classmethod
    def zeros(cls, grid: ChannelGrid) -> "ModeStack":
        return cls(grid, np.zeros((grid.n_modes, grid.ny + 1), dtype=complex))

    def profile(self, k: int) -> np.ndarray:
        """Profile of wavenumber k in -nx/2..nx/2; negative k via conjugate symmetry."""

        if abs(k) > self.grid.nx // 2:
            raise GridError(f"波数 {k} は解像範囲外です")
        if k >= 0:
            return self.profiles[k]
        return np.conj(self.profiles[-k])

    def masked(self, mask: np.ndarray) -> "ModeStack":
        return ModeStack(self.grid, self.profiles * mask[:, None])

    def __add__(self, other: "ModeStack") -> "ModeStack":
        return ModeStack(self.grid, self.profiles + other.profiles)

    def __sub__(self, other: "ModeStack") -> "ModeStack":
        return ModeStack(self.grid, self.profiles - other.profiles)

    def __mul__(self, scalar: complex) -> "ModeStack":
        return ModeStack(self.grid, self.profiles * scalar)

    __rmul__ = __mul__


# Public API ------------------------------------------------------------------
def to_spectral(f: PhysField) -> ModeStack:
    if not f.is_finite():
        raise BlowUpDataError("非有限値 (NaN/Inf) を含む場はスペクトル変換できません")
    profiles = fft.rfft(f.values, axis=0) / f.grid.nx
    return ModeStack(f.grid, profiles)


def to_physical(m: ModeStack) -> PhysField:
    values = fft.irfft(m.profiles * m.grid.nx, n=m.grid.nx, axis=0)
    return PhysField(m.grid, values)


def zero_profile(f: PhysField) -> np.ndarray:
    """x-average of f as a y-profile."""

    return f.values.mean(axis=0)


def project_zero(f: PhysField) -> PhysField:
    return PhysField.from_profile(f.grid, zero_profile(f))


def project_nonzero(f: PhysField) -> PhysField:
    return PhysField(f.grid, f.values - zero_profile(f)[None, :])


def ddx_spectral(m: ModeStack) -> ModeStack:
    factor = 1j * m.grid.wavenumbers.astype(float)
    # Nyquist モードの微分は実数場では表現できないので 0 にする
    factor[-1] = 0.0
    return ModeStack(m.grid, m.profiles * factor[:, None])


def ddy_spectral(m: ModeStack) -> ModeStack:
    return ModeStack(m.grid, m.profiles @ m.grid.D1.T)


def ddx(f: PhysField) -> PhysField:
    return to_physical(ddx_spectral(to_spectral(f)))


def ddy(f: PhysField) -> PhysField:
    return PhysField(f.grid, f.values @ f.grid.D1.T)


def ddy_profile(grid: ChannelGrid, profile: np.ndarray) -> np.ndarray:
    return grid.D1 @ profile


def laplacian(f: PhysField) -> PhysField:
    return ddx(ddx(f)) + PhysField(f.grid, f.values @ f.grid.D2.T)


def dealias(f: PhysField) -> PhysField:
    if not f.grid.dealias:
        return f
    return to_physical(to_spectral(f).masked(f.grid.dealias_mask))


def integrate(f: PhysField) -> float:
    return float(np.sum(f.grid.quadrature * f.values))


def inner(f: PhysField, g: PhysField) -> float:
    return integrate(f * g)


def lp_norm(f: PhysField, p: Norm = 2) -> float:
    """Quadrature L^p norm over T x I for p in {1, 2, 4, inf}; inf is the nodal max."""

    if p in ("inf", np.inf, float("inf")):
        return f.max_abs()
    if p not in (1, 2, 4):
        raise GridError(f"未対応のノルム指数です: {p}")
    total = float(np.sum(f.grid.quadrature * np.abs(f.values) ** p))
    return total ** (1.0 / p)


def gradient_l2(f: PhysField) -> float:
    gx = ddx(f).values
    gy = ddy(f).values
    return float(np.sqrt(np.sum(f.grid.quadrature * (gx**2 + gy**2))))


def spectral_l2_squared(m: ModeStack) -> float:
    """2 pi sum_k int_I |f_k|^2 dy, summing over +-k through conjugate symmetry."""

    per_mode = (np.abs(m.profiles) ** 2) @ m.grid.weights
    return float(DOMAIN_LENGTH * np.dot(m.grid.mode_weights, per_mode))


def profile_l2(grid: ChannelGrid, profile: np.ndarray) -> float:
    """L^2(I) norm of one y-profile."""

    return float(np.sqrt(np.dot(grid.weights, np.abs(profile) ** 2)))


def profile_integral(grid: ChannelGrid, profile: np.ndarray) -> complex:
    return complex(np.dot(grid.weights, profile))


# Field I/O -------------------------------------------------------------------
def write_field_csv(f: PhysField, path: Path) -> None:
    """One row per y-node, one column per x-node, preceded by a metadata row."""

    grid = f.grid
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(f"# nx={grid.nx},ny={grid.ny},dealias={int(grid.dealias)}\n")
        writer = csv.writer(handle, lineterminator="\n")
        for row in f.values.T:
            writer.writerow([repr(float(value)) for value in row])


def read_field_csv(path: Path) -> PhysField:
    with path.open("r", encoding="utf-8", newline="") as handle:
        header = handle.readline().strip()
        grid = _grid_from_header(header, path)
        rows = [[float(item) for item in row] for row in csv.reader(handle) if row]
    values = np.array(rows, dtype=float)
    if values.shape != (grid.ny + 1, grid.nx):
        raise FieldFormatError(f"{path}: 行列の形状 {values.shape} がヘッダと一致しません")
    return PhysField(grid, values.T.copy())


def write_field_binary(f: PhysField, path: Path) -> None:
    """32-byte header (magic, nx, ny, flags) then little-endian float64, rows = y-nodes."""

    grid = f.grid
    flags = FLAG_DEALIAS if grid.dealias else 0
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _BINARY_HEADER.pack(BINARY_MAGIC, grid.nx, grid.ny, flags)
    path.write_bytes(header + np.ascontiguousarray(f.values.T, dtype="<f8").tobytes())


def read_field_binary(path: Path) -> PhysField:
    payload = path.read_bytes()
    if len(payload) < _BINARY_HEADER.size:
        raise FieldFormatError(f"{path}: ヘッダが短すぎます")
    magic, nx, ny, flags = _BINARY_HEADER.unpack_from(payload)
    if magic != BINARY_MAGIC:
        raise FieldFormatError(f"{path}: マジックナンバーが一致しません")
    grid = ChannelGrid(nx=int(nx), ny=int(ny), dealias=bool(flags & FLAG_DEALIAS))
    body = np.frombuffer(payload, dtype="<f8", offset=_BINARY_HEADER.size)
    if body.size != grid.nx * (grid.ny + 1):
        raise FieldFormatError(f"{path}: データ長 {body.size} がヘッダと一致しません")
    return PhysField(grid, body.reshape(grid.ny + 1, grid.nx).T.copy())


# Internal helpers ------------------------------------------------------------
def _grid_from_header(header: str, path: Path) -> ChannelGrid:
    if not header.startswith("#"):
        raise FieldFormatError(f"{path}: メタデータ行がありません")
    try:
        items = dict(part.split("=", 1) for part in header[1:].strip().split(","))
        return ChannelGrid(nx=int(items["nx"]), ny=int(items["ny"]), dealias=bool(int(items["dealias"])))
    except (KeyError, ValueError) as exc:
        raise FieldFormatError(f"{path}: メタデータ行を解釈できません: {header}") from exc
