from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .elliptic import solve_chemo, solve_stream_velocity, zero_mode_velocity
from .grid import ChannelGrid, PhysField, integrate
from .models import DensityBC


@dataclass(frozen=True, eq=False)
class SimState:
    """
    Prognostic variables (n1, n2, omega, u01) at rescaled time t.

    c and the velocity are derived on first access and never integrated.
    """

    grid: ChannelGrid
    t: float
    n1: PhysField
    n2: PhysField
    omega: PhysField
    u01: np.ndarray
    bc: DensityBC = DensityBC.NEUMANN

    def __post_init__(self) -> None:
        object.__setattr__(self, "bc", DensityBC(self.bc))
        object.__setattr__(self, "u01", np.asarray(self.u01, dtype=float))
        if self.u01.shape != (self.grid.ny + 1,):
            raise ValueError(f"u01 の長さ {self.u01.shape} が ny+1 と一致しません")

    @classmethod
    def zeros(cls, grid: ChannelGrid, bc: DensityBC = DensityBC.NEUMANN, t: float = 0.0) -> "SimState":
        zero = PhysField.zeros(grid)
        return cls(grid=grid, t=t, n1=zero, n2=zero, omega=zero, u01=np.zeros(grid.ny + 1), bc=bc)

    @cached_property
    def c(self) -> PhysField:
        return solve_chemo(self.n1 + self.n2, self.bc)

    @cached_property
    def stream_velocity(self) -> tuple[PhysField, PhysField, PhysField]:
        """(Phi, u1, u2) of the non-zero modes."""

        return solve_stream_velocity(self.omega)

    @property
    def u1_nonzero(self) -> PhysField:
        return self.stream_velocity[1]

    @property
    def u2_nonzero(self) -> PhysField:
        return self.stream_velocity[2]

    @cached_property
    def u1(self) -> PhysField:
        return self.u1_nonzero + zero_mode_velocity(self.grid, self.u01)

    @property
    def u2(self) -> PhysField:
        return self.u2_nonzero

    def density(self, species: int) -> PhysField:
        return self.n1 if species == 1 else self.n2

    def mass(self, species: int) -> float:
        return integrate(self.density(species))

    def is_finite(self) -> bool:
        return (
            self.n1.is_finite()
            and self.n2.is_finite()
            and self.omega.is_finite()
            and bool(np.all(np.isfinite(self.u01)))
        )

    def with_fields(self, **changes) -> "SimState":
        payload = {
            "grid": self.grid,
            "t": self.t,
            "n1": self.n1,
            "n2": self.n2,
            "omega": self.omega,
            "u01": self.u01,
            "bc": self.bc,
        }
        payload.update(changes)
        return SimState(**payload)
