from __future__ import annotations

"""
IMEX time integration of the rescaled chemotaxis-fluid system.

Diffusion (nu * Laplacian) is implicit and k-diagonal; shear advection, the
nonlocal vorticity term, chemotactic fluxes, transport and buoyancy are
explicit. nu = 1/A, or 1 with the shear switched off (A = 0).
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import XaAccumulator, energy_E, record, update_xa
from .elliptic import EllipticSolveError, solve_modes, solve_profile
from .grid import (
    BlowUpDataError,
    ChannelGrid,
    ModeStack,
    PhysField,
    ddx,
    ddy,
    integrate,
    laplacian,
    lp_norm,
    profile_integral,
    project_nonzero,
    project_zero,
    to_physical,
    to_spectral,
    zero_profile,
)
from .models import DensityBC, DiagRecord, InitialSpec, Scheme, SimParams, Termination
from .state import SimState

logger = logging.getLogger(__name__)

SNAPSHOT_POLICIES = ("none", "final", "samples")


class DynamicsError(Exception):
    """Base class for time-integration errors."""


class ConfigurationError(DynamicsError):
    """Raised when initial data or run settings are unusable."""


class NumericalInstabilityError(DynamicsError):
    """Raised when a step cannot be completed with finite values."""


class CflViolation(NumericalInstabilityError):
    """Raised when dt exceeds the advective stability limit."""

    def __init__(self, number: float, limit: float) -> None:
        super().__init__(f"CFL 数 {number:.3e} が上限 {limit:.3e} を超えました")
        self.number = number
        self.limit = limit


class TrajectoryError(DynamicsError):
    """Raised when a trajectory is terminated twice or sampled out of order."""


# Initial data ----------------------------------------------------------------
def make_initial(grid: ChannelGrid, spec: InitialSpec, bc: DensityBC = DensityBC.NEUMANN) -> SimState:
    bc = DensityBC(bc)
    for species, mass in ((1, spec.mass1), (2, spec.mass2)):
        if not mass > 0.0:
            raise ConfigurationError(f"species {species} の質量は正である必要があります: {mass}")
        if not any(b.species == species for b in spec.bumps):
            raise ConfigurationError(f"species {species} に対応する bump がありません")
    if not 0.0 <= spec.noise < 1.0:
        raise ConfigurationError(f"noise は [0, 1) の範囲で指定してください: {spec.noise}")

    spacing = max(grid.dx, grid.dy_max)
    X, Y = grid.meshgrid()
    rng = np.random.default_rng(spec.seed)
    densities = []
    for species, mass in ((1, spec.mass1), (2, spec.mass2)):
        values = np.zeros(grid.shape)
        for bump in spec.bumps:
            if bump.species != species:
                continue
            if bump.width < 2.0 * spacing:
                raise ConfigurationError(
                    f"bump の幅 {bump.width} が格子間隔の 2 倍 ({2.0 * spacing:.4f}) より小さく解像できません"
                )
            values += _gaussian(X, Y, bump.x, bump.y, bump.width, bc)
        if bc is DensityBC.DIRICHLET:
            values *= 1.0 - Y**2
        if spec.noise > 0.0:
            values *= 1.0 + spec.noise * _smooth_noise(grid, rng, bc)
        field_ = PhysField(grid, values)
        total = integrate(field_)
        if not total > 0.0:
            raise ConfigurationError(f"species {species} の初期分布が壁で打ち消され質量が 0 になりました")
        densities.append(field_ * (mass / total))

    u01 = spec.u01_amplitude * np.cos(np.pi * grid.y)
    omega = spec.omega_amplitude * np.cos(spec.omega_mode * X) * (1.0 - Y**2)
    # 平均流と整合する omega_0 = d_y u01
    omega = omega - np.pi * spec.u01_amplitude * np.sin(np.pi * Y)
    omega[:, 0] = 0.0
    omega[:, -1] = 0.0
    return SimState(
        grid=grid,
        t=0.0,
        n1=densities[0],
        n2=densities[1],
        omega=PhysField(grid, omega),
        u01=u01,
        bc=bc,
    )


# Tendencies ------------------------------------------------------------------
@dataclass(frozen=True)
class Tendencies:
    """Explicit right-hand sides in spectral form (u01 as a real profile)."""

    n1: ModeStack
    n2: ModeStack
    omega: ModeStack
    u01: np.ndarray

    def density(self, species: int) -> ModeStack:
        return self.n1 if species == 1 else self.n2


def explicit_fields(state: SimState, params: SimParams) -> dict[str, PhysField | np.ndarray]:
    """Explicit terms in physical space, before dealiasing."""

    grid = state.grid
    s, nu = params.shear, params.nu
    shear = grid.shear_profile[None, :]
    c = state.c
    cx, cy = ddx(c), ddy(c)
    u1, u2 = state.u1, state.u2

    out: dict[str, PhysField | np.ndarray] = {}
    for species in (1, 2):
        n = state.density(species)
        chi = params.chi(species)
        flux_x = chi * n * cx + u1 * n
        flux_y = chi * n * cy + u2 * n
        out[f"n{species}"] = -s * shear * ddx(n) - nu * (ddx(flux_x) + ddy(flux_y))

    omega = state.omega
    buoyancy = ddx(state.n1 + state.n2) if params.buoyancy else PhysField.zeros(grid)
    out["omega"] = (
        -s * shear * ddx(omega)
        + 2.0 * s * u2
        - nu * (buoyancy + ddx(u1 * omega) + ddy(u2 * omega))
    )

    stress = zero_profile(state.u2_nonzero * state.u1_nonzero)
    out["u01"] = -nu * (grid.D1 @ stress)
    return out


def explicit_tendencies(state: SimState, params: SimParams) -> Tendencies:
    grid = state.grid
    fields = explicit_fields(state, params)
    mask = grid.dealias_mask
    return Tendencies(
        n1=to_spectral(fields["n1"]).masked(mask),
        n2=to_spectral(fields["n2"]).masked(mask),
        omega=to_spectral(fields["omega"]).masked(mask),
        u01=np.asarray(fields["u01"], dtype=float),
    )


def full_tendencies(state: SimState, params: SimParams) -> dict[str, PhysField]:
    """d/dt of n1, n2, omega including diffusion, without dealiasing."""

    fields = explicit_fields(state, params)
    nu = params.nu
    return {
        "n1": fields["n1"] + nu * laplacian(state.n1),
        "n2": fields["n2"] + nu * laplacian(state.n2),
        "omega": fields["omega"] + nu * laplacian(state.omega),
    }


def split_tendencies(state: SimState, params: SimParams) -> dict[str, dict[str, PhysField]]:
    """
    Right-hand sides of the zero-mode and non-zero-mode systems, assembled
    term by term from the decomposed fields of a frozen state.
    """

    grid = state.grid
    s, nu = params.shear, params.nu
    shear = grid.shear_profile[None, :]
    P0, Pn = project_zero, project_nonzero

    def div(fx: PhysField, fy: PhysField) -> PhysField:
        return ddx(fx) + ddy(fy)

    c = state.c
    c0, cn = P0(c), Pn(c)
    u0 = PhysField.from_profile(grid, state.u01)
    un1, un2 = state.u1_nonzero, state.u2_nonzero
    zero = PhysField.zeros(grid)

    zero_part: dict[str, PhysField] = {}
    nonzero_part: dict[str, PhysField] = {}
    for species in (1, 2):
        n = state.density(species)
        chi = params.chi(species)
        n0, nn = P0(n), Pn(n)
        key = f"n{species}"
        zero_part[key] = (
            nu * laplacian(n0)
            - chi * nu * (P0(div(nn * ddx(cn), nn * ddy(cn))) + ddy(n0 * ddy(c0)))
            - nu * P0(div(un1 * nn, un2 * nn))
        )
        nonzero_part[key] = (
            -s * shear * ddx(nn)
            + nu * laplacian(nn)
            - chi
            * nu
            * (Pn(div(nn * ddx(cn), nn * ddy(cn))) + div(n0 * ddx(cn), n0 * ddy(cn)) + ddy(nn * ddy(c0)))
            - nu * (Pn(div(un1 * nn, un2 * nn)) + div(u0 * nn, zero) + div(un1 * n0, un2 * n0))
        )

    omega = state.omega
    w0, wn = P0(omega), Pn(omega)
    zero_part["omega"] = nu * laplacian(w0) - nu * P0(div(un1 * wn, un2 * wn))
    buoyancy = ddx(Pn(state.n1) + Pn(state.n2)) if params.buoyancy else zero
    nonzero_part["omega"] = (
        -s * shear * ddx(wn)
        + 2.0 * s * un2
        + nu * laplacian(wn)
        - nu * (Pn(div(un1 * wn, un2 * wn)) + div(u0 * wn, zero) + div(un1 * w0, un2 * w0))
        - nu * buoyancy
    )
    return {"zero": zero_part, "nonzero": nonzero_part}


# Stability -------------------------------------------------------------------
def cfl_number(state: SimState, params: SimParams, dt: float) -> float:
    grid = state.grid
    nu = params.nu
    chi_max = max(abs(params.chi1), abs(params.chi2))
    c = state.c
    vx = params.shear * grid.shear_profile[None, :] + nu * state.u1.values
    vx_max = float(np.max(np.abs(vx))) + nu * chi_max * ddx(c).max_abs()
    vy_max = nu * (state.u2.max_abs() + chi_max * ddy(c).max_abs())
    return dt * max(vx_max / grid.dx, vy_max / grid.dy_min)


def check_cfl(state: SimState, params: SimParams, dt: float) -> None:
    number = cfl_number(state, params, dt)
    if not math.isfinite(number) or number > params.cfl_safety:
        raise CflViolation(number, params.cfl_safety)


# Integrator ------------------------------------------------------------------
@dataclass
class _History:
    state: SimState
    tendencies: Tendencies
    dt: float


class Integrator:
    """
    Advances a state by one IMEX step.

    SBDF2 keeps the previous state and tendencies; any change of dt restarts
    it with one Euler step.
    """

    def __init__(self, params: SimParams) -> None:
        self._params = params
        self._history: _History | None = None
        # 直前のステップで質量補正前に生じていた差（Neumann のみ）
        self.last_mass_correction = 0.0

    @property
    def params(self) -> SimParams:
        return self._params

    def reset(self) -> None:
        self._history = None

    def advance(self, state: SimState, dt: float) -> SimState:
        params = self._params
        check_cfl(state, params, dt)
        self.last_mass_correction = 0.0
        try:
            tendencies = explicit_tendencies(state, params)
        except BlowUpDataError as exc:
            raise NumericalInstabilityError(str(exc)) from exc

        history = self._history
        use_sbdf2 = (
            params.scheme is Scheme.SBDF2
            and history is not None
            and math.isclose(history.dt, dt, rel_tol=1e-12, abs_tol=0.0)
        )
        try:
            if use_sbdf2:
                new_state = self._sbdf2(state, tendencies, history, dt)
            else:
                new_state = self._euler(state, tendencies, dt)
        except EllipticSolveError as exc:
            raise NumericalInstabilityError(str(exc)) from exc

        if not new_state.is_finite():
            raise NumericalInstabilityError(f"t={new_state.t:.6g} で非有限値が発生しました")
        self._history = _History(state=state, tendencies=tendencies, dt=dt)
        return new_state

    # Internal helpers ---------------------------------------------------
    def _restore(self, m: ModeStack, target: float) -> ModeStack:
        self.last_mass_correction = max(self.last_mass_correction, abs(target - _mass_of(m)))
        return _restore_mass(m, target)

    def _euler(self, state: SimState, tend: Tendencies, dt: float) -> SimState:
        scale = dt * self._params.nu
        fields = {}
        for species in (1, 2):
            old = to_spectral(state.density(species))
            rhs = old + tend.density(species) * dt
            new = solve_modes(rhs, state.bc, shift=1.0, scale=scale)
            if state.bc is DensityBC.NEUMANN:
                target = _mass_of(old) + dt * _mass_of(tend.density(species))
                new = self._restore(new, target)
            fields[f"n{species}"] = to_physical(new)

        omega_rhs = to_spectral(state.omega) + tend.omega * dt
        omega = solve_modes(omega_rhs, DensityBC.DIRICHLET, shift=1.0, scale=scale)

        u01_rhs = state.u01 + dt * tend.u01
        u01 = solve_profile(state.grid, u01_rhs, 0, DensityBC.NEUMANN, shift=1.0, scale=scale).real
        u01 = _shift_profile_mean(state.grid, u01, _profile_mean(state.grid, u01_rhs))
        return state.with_fields(t=state.t + dt, omega=to_physical(omega), u01=u01, **fields)

    def _sbdf2(self, state: SimState, tend: Tendencies, history: _History, dt: float) -> SimState:
        scale = dt * self._params.nu
        prev_state, prev_tend = history.state, history.tendencies
        fields = {}
        for species in (1, 2):
            old = to_spectral(state.density(species))
            older = to_spectral(prev_state.density(species))
            explicit = tend.density(species) * 2.0 - prev_tend.density(species)
            rhs = old * 2.0 - older * 0.5 + explicit * dt
            new = solve_modes(rhs, state.bc, shift=1.5, scale=scale)
            if state.bc is DensityBC.NEUMANN:
                target = (
                    2.0 * _mass_of(old)
                    - 0.5 * _mass_of(older)
                    + dt * (2.0 * _mass_of(tend.density(species)) - _mass_of(prev_tend.density(species)))
                ) / 1.5
                new = self._restore(new, target)
            fields[f"n{species}"] = to_physical(new)

        omega_rhs = (
            to_spectral(state.omega) * 2.0
            - to_spectral(prev_state.omega) * 0.5
            + (tend.omega * 2.0 - prev_tend.omega) * dt
        )
        omega = solve_modes(omega_rhs, DensityBC.DIRICHLET, shift=1.5, scale=scale)

        u01_rhs = 2.0 * state.u01 - 0.5 * prev_state.u01 + dt * (2.0 * tend.u01 - prev_tend.u01)
        u01 = solve_profile(state.grid, u01_rhs, 0, DensityBC.NEUMANN, shift=1.5, scale=scale).real
        u01 = _shift_profile_mean(state.grid, u01, _profile_mean(state.grid, u01_rhs) / 1.5)
        return state.with_fields(t=state.t + dt, omega=to_physical(omega), u01=u01, **fields)


def step(s: SimState, p: SimParams) -> SimState:
    """One IMEX Euler step of size p.dt."""

    return Integrator(p.replace(scheme=Scheme.EULER.value)).advance(s, p.dt)


# Trajectory ------------------------------------------------------------------
@dataclass
class Trajectory:
    params: SimParams
    initial_linf: tuple[float, float]
    records: list[DiagRecord] = field(default_factory=list)
    accumulators: dict[str, XaAccumulator] = field(default_factory=dict)
    termination: Termination | None = None
    snapshots: list[SimState] = field(default_factory=list)
    final_state: SimState | None = None
    notes: list[str] = field(default_factory=list)
    dt_halvings: int = 0
    linf_peak: tuple[float, float] | None = None
    mass_correction: float = 0.0

    def __post_init__(self) -> None:
        if self.linf_peak is None:
            self.linf_peak = tuple(self.initial_linf)

    @property
    def times(self) -> list[float]:
        return [r.t for r in self.records]

    def observe(self, state: SimState) -> tuple[float, float]:
        """Fold the sup norms of an accepted state into the running peaks."""

        values = (state.n1.max_abs(), state.n2.max_abs())
        self.linf_peak = (max(self.linf_peak[0], values[0]), max(self.linf_peak[1], values[1]))
        return values

    def terminate(self, kind: Termination, note: str | None = None) -> None:
        if self.termination is not None:
            raise TrajectoryError(f"終了状態は既に {self.termination.value} に設定されています")
        self.termination = Termination(kind)
        if note:
            self.notes.append(note)

    def add_sample(self, state: SimState, dt: float) -> None:
        if self.records and state.t <= self.records[-1].t:
            raise TrajectoryError(f"サンプル時刻が増加していません: {state.t}")
        self.records.append(record(state, dt))
        self.observe(state)
        for name, f in (("n1", state.n1), ("n2", state.n2), ("omega", state.omega)):
            self.accumulators[name] = update_xa(self.accumulators[name], state.t, project_nonzero(f))

    @property
    def energy(self) -> float:
        return energy_E(self.accumulators["n1"], self.accumulators["n2"], self.accumulators["omega"])


def blowup_thresholds(initial: tuple[float, float], factor: float) -> tuple[float, float]:
    """factor * |n_k(0)|_inf per species; a species starting at zero never trips."""

    return tuple(factor * value if value > 0.0 else math.inf for value in initial)


def run(
    s0: SimState,
    p: SimParams,
    sample_every: float,
    snapshots: str = "none",
) -> Trajectory:
    """Integrate to p.t_end or termination, sampling diagnostics every sample_every."""

    if not sample_every > 0.0:
        raise ConfigurationError(f"sample_every は正である必要があります: {sample_every}")
    if snapshots not in SNAPSHOT_POLICIES:
        raise ConfigurationError(f"未知のスナップショット方針です: {snapshots}")
    if not s0.is_finite():
        raise ConfigurationError("初期状態に非有限値が含まれています")

    initial = (s0.n1.max_abs(), s0.n2.max_abs())
    traj = Trajectory(params=p, initial_linf=initial)
    accumulator = XaAccumulator(a_rate=p.a_rate, A=p.A_eff)
    traj.accumulators = {"n1": accumulator, "n2": accumulator, "omega": accumulator}
    thresholds = blowup_thresholds(initial, p.blowup_factor)

    integrator = Integrator(p)
    state = s0
    dt = p.dt
    eps = 1e-12 * max(1.0, abs(p.t_end))
    traj.add_sample(state, dt)
    if snapshots == "samples":
        traj.snapshots.append(state)
    next_sample = state.t + sample_every

    while state.t < p.t_end - eps:
        h = min(dt, p.t_end - state.t)
        try:
            new_state = integrator.advance(state, h)
        except CflViolation as exc:
            if traj.dt_halvings >= p.max_halvings:
                traj.terminate(Termination.BLOW_UP, f"dt underflow at t={state.t:.6g}: {exc}")
                break
            dt *= 0.5
            traj.dt_halvings += 1
            integrator.reset()
            logger.info("CFL violation at t=%.6g, dt halved to %.3e", state.t, dt)
            continue
        except NumericalInstabilityError as exc:
            traj.terminate(Termination.NUMERICAL_INSTABILITY, str(exc))
            break

        state = new_state
        traj.mass_correction += integrator.last_mass_correction
        values = traj.observe(state)
        tripped = [species for species in (1, 2) if values[species - 1] >= thresholds[species - 1]]
        if tripped:
            traj.add_sample(state, h)
            traj.terminate(Termination.BLOW_UP, f"species {tripped} exceeded blow-up threshold at t={state.t:.6g}")
            break
        if state.t >= next_sample - eps:
            traj.add_sample(state, h)
            if snapshots == "samples":
                traj.snapshots.append(state)
            while next_sample <= state.t + eps:
                next_sample += sample_every

    if traj.termination is None:
        traj.terminate(Termination.COMPLETED)
        if traj.records[-1].t < state.t:
            traj.add_sample(state, dt)
            if snapshots == "samples":
                traj.snapshots.append(state)
    if snapshots == "final":
        traj.snapshots.append(state)
    traj.final_state = state
    logger.info(
        "run finished: termination=%s t=%.6g samples=%d halvings=%d mass_correction=%.3e",
        traj.termination.value,
        state.t,
        len(traj.records),
        traj.dt_halvings,
        traj.mass_correction,
    )
    return traj


# Internal helpers ------------------------------------------------------------
def _gaussian(X: np.ndarray, Y: np.ndarray, x0: float, y0: float, width: float, bc: DensityBC) -> np.ndarray:
    centers_y = [y0]
    if bc is DensityBC.NEUMANN:
        # 壁 y=±1 に関する鏡像を足して壁での法線微分をほぼ 0 にする
        centers_y += [2.0 - y0, -2.0 - y0]
    values = np.zeros(X.shape)
    for shift in (-2.0 * np.pi, 0.0, 2.0 * np.pi):
        for yc in centers_y:
            values += np.exp(-((X - x0 + shift) ** 2 + (Y - yc) ** 2) / (2.0 * width**2))
    return values


def _smooth_noise(grid: ChannelGrid, rng: np.random.Generator, bc: DensityBC) -> np.ndarray:
    X, Y = grid.meshgrid()
    noise = np.zeros(grid.shape)
    for k in range(0, 4):
        for m in range(0, 4):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            basis = np.cos(m * np.pi * Y) if bc is DensityBC.NEUMANN else np.cos((m + 0.5) * np.pi * Y)
            noise += rng.normal() * np.cos(k * X + phase) * basis
    peak = np.max(np.abs(noise))
    return noise / peak if peak > 0 else noise


def _mass_of(m: ModeStack) -> float:
    return 2.0 * math.pi * profile_integral(m.grid, m.profiles[0]).real


def _restore_mass(m: ModeStack, target: float) -> ModeStack:
    """Shift the k = 0 profile by a constant so that the integral equals target."""

    delta = (target - _mass_of(m)) / (4.0 * math.pi)
    if delta != 0.0:
        logger.debug("mass correction %.3e", delta)
    profiles = m.profiles.copy()
    profiles[0] += delta
    return ModeStack(m.grid, profiles)


def _profile_mean(grid: ChannelGrid, profile: np.ndarray) -> float:
    return 0.5 * profile_integral(grid, profile).real


def _shift_profile_mean(grid: ChannelGrid, profile: np.ndarray, mean: float) -> np.ndarray:
    return profile + (mean - _profile_mean(grid, profile))
