from __future__ import annotations

"""
Numerical study of the linearized shear operator

    L f = -(1/A)(f'' - k^2 f) + i k (1 - y^2) f,   f(+-1) = 0,

and of its nonlocal variant with + 2 i k (d_y^2 - k^2)^{-1}. Matrices act on
the interior Chebyshev nodes and are conjugated by sqrt(Clenshaw-Curtis)
weights so that matrix 2-norms are L^2(I) operator norms.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg
from scipy.optimize import minimize_scalar
from scipy.stats import linregress
from scipy.stats import t as student_t

from .diagnostics import XaAccumulator, update_xa_values
from .grid import chebyshev_diff_matrix, chebyshev_points, clenshaw_curtis_weights

logger = logging.getLogger(__name__)

RESIDUAL_TOLERANCE = 1e-10
CONVERGENCE_CHANGE = 0.01
REGIME_NEGATIVE = "negative"
REGIME_CRITICAL = "critical"
REGIME_POSITIVE = "positive"


class LinearAnalysisError(Exception):
    """Base class for linear-analysis errors."""


class PsiGridError(LinearAnalysisError):
    """Raised when the minimizing shift stays on the edge of the widened grid."""


# Operator --------------------------------------------------------------------
@dataclass(frozen=True)
class OSOperator:
    """Collocation discretization of the per-wavenumber shear operator."""

    A: float
    k: int
    ny: int = 128
    nonlocal_term: bool = False

    def __post_init__(self) -> None:
        if self.A < 1.0:
            raise LinearAnalysisError(f"A は 1 以上である必要があります: {self.A}")
        if self.k == 0:
            raise LinearAnalysisError("k = 0 は対象外です")
        if self.ny < 8:
            raise LinearAnalysisError(f"ny は 8 以上である必要があります: {self.ny}")

    @cached_property
    def y(self) -> np.ndarray:
        return chebyshev_points(self.ny)

    @cached_property
    def weights(self) -> np.ndarray:
        return clenshaw_curtis_weights(self.ny)

    @cached_property
    def _sqrt_weights(self) -> np.ndarray:
        return np.sqrt(self.weights[1:-1])

    @cached_property
    def D1(self) -> np.ndarray:
        return chebyshev_diff_matrix(self.ny)

    @cached_property
    def laplacian_interior(self) -> np.ndarray:
        """(d_y^2 - k^2) on interior nodes with f(+-1) = 0."""

        D2 = self.D1 @ self.D1
        n = self.ny - 1
        return D2[1:-1, 1:-1] - (self.k**2) * np.eye(n)

    @cached_property
    def matrix(self) -> np.ndarray:
        """Unweighted operator on interior nodal values."""

        k = self.k
        shear = 1.0 - self.y[1:-1] ** 2
        L = -self.laplacian_interior / self.A + 1j * k * np.diag(shear)
        if self.nonlocal_term:
            L = L + 2j * k * np.linalg.inv(self.laplacian_interior)
        return L

    @cached_property
    def weighted(self) -> np.ndarray:
        s = self._sqrt_weights
        return (s[:, None] * self.matrix) / s[None, :]

    def to_weighted(self, profile: np.ndarray) -> np.ndarray:
        return self._sqrt_weights * np.asarray(profile)[1:-1]

    def from_weighted(self, vector: np.ndarray) -> np.ndarray:
        full = np.zeros(self.ny + 1, dtype=complex)
        full[1:-1] = vector / self._sqrt_weights
        return full

    def l2(self, profile: np.ndarray) -> float:
        return float(np.sqrt(np.dot(self.weights, np.abs(profile) ** 2)))

    def inner(self, f: np.ndarray, g: np.ndarray) -> complex:
        return complex(np.dot(self.weights, f * np.conj(g)))

    def apply(self, profile: np.ndarray) -> np.ndarray:
        """L applied to a full profile vanishing at the walls."""

        out = np.zeros(self.ny + 1, dtype=complex)
        out[1:-1] = self.matrix @ np.asarray(profile, dtype=complex)[1:-1]
        return out

    def shifted(self, mu: float) -> np.ndarray:
        """Weighted matrix of L - i mu."""

        return self.weighted - 1j * mu * np.eye(self.ny - 1)

    def sigma_min(self, mu: float) -> float:
        return float(linalg.svdvals(self.shifted(mu))[-1])

    def sigma_min_iterative(self, mu: float, block: int = 4, tol: float = 1e-13, max_iter: int = 2000) -> float:
        """Smallest singular value by block inverse subspace iteration on (M^H M)^{-1}."""

        M = self.shifted(mu)
        lu = linalg.lu_factor(M)
        n = M.shape[0]
        rng = np.random.default_rng(12345)
        X = rng.normal(size=(n, block)) + 1j * rng.normal(size=(n, block))
        X, _ = np.linalg.qr(X)
        previous = math.inf
        theta = 0.0
        for _ in range(max_iter):
            Y = linalg.lu_solve(lu, X, trans=2)
            # Rayleigh-Ritz: X^H (M^-1 M^-H) X = Y^H Y
            theta = float(linalg.eigh(Y.conj().T @ Y, eigvals_only=True)[-1])
            Z = linalg.lu_solve(lu, Y)
            X, _ = np.linalg.qr(Z)
            if abs(theta - previous) <= tol * theta:
                break
            previous = theta
        return 1.0 / math.sqrt(theta)

    def numerical_range_min(self, profiles: list[np.ndarray]) -> float:
        """min Re<Lf, f> over the given profiles normalized in L^2(I)."""

        values = []
        for f in profiles:
            norm = self.l2(f)
            if norm == 0.0:
                continue
            g = np.asarray(f, dtype=complex) / norm
            values.append(self.inner(self.apply(g), g).real)
        return min(values) if values else 0.0

    def dissipation(self, profile: np.ndarray) -> float:
        """(1/A)(|f'|^2 + k^2 |f|^2), the real part of <Lf, f> in the continuum."""

        f = np.asarray(profile, dtype=complex)
        df = self.D1 @ f
        return (self.l2(df) ** 2 + self.k**2 * self.l2(f) ** 2) / self.A

    def random_profiles(self, rng: np.random.Generator, count: int = 20, modes: int = 6) -> list[np.ndarray]:
        """Smooth random profiles vanishing at the walls, normalized in L^2(I)."""

        phase = np.pi * (self.y + 1.0) / 2.0
        basis = np.array([np.sin((m + 1) * phase) for m in range(modes)])
        profiles = []
        for _ in range(count):
            coeffs = (rng.normal(size=modes) + 1j * rng.normal(size=modes)) / np.arange(1, modes + 1)
            f = coeffs @ basis
            f[0] = f[-1] = 0.0
            profiles.append(f / self.l2(f))
        return profiles

    def spectral_abscissa(self) -> float:
        return float(np.min(linalg.eigvals(self.matrix).real))


def accretivity_margin(op: OSOperator, rng: np.random.Generator, count: int = 20) -> float:
    """min Re<Lf, f> over random unit profiles; nonnegative for an accretive discretization."""

    margin = op.numerical_range_min(op.random_profiles(rng, count))
    if margin < -1e-10:
        logger.warning("numerical range leaves the right half-plane: %.3e (A=%g, k=%d)", margin, op.A, op.k)
    return margin


# Resolvent -------------------------------------------------------------------
def solve_os_resolvent(
    A: float,
    k: int,
    lam: float,
    F: np.ndarray,
    ny: int | None = None,
    nonlocal_term: bool = False,
) -> np.ndarray:
    """Solve (L - i k lam) f = F with f(+-1) = 0; F is a full (ny + 1) profile."""

    F = np.asarray(F, dtype=complex)
    op = OSOperator(A=A, k=k, ny=ny or F.size - 1, nonlocal_term=nonlocal_term)
    if F.size != op.ny + 1:
        raise LinearAnalysisError(f"F の長さ {F.size} が ny+1 = {op.ny + 1} と一致しません")
    M = op.matrix - 1j * k * lam * np.eye(op.ny - 1)
    try:
        interior = linalg.solve(M, F[1:-1])
    except linalg.LinAlgError as exc:
        raise LinearAnalysisError(f"レゾルベント方程式が特異です (A={A}, k={k}, lam={lam})") from exc
    f = np.zeros(op.ny + 1, dtype=complex)
    f[1:-1] = interior
    residual = op.l2(np.concatenate([[0.0], M @ interior - F[1:-1], [0.0]]))
    if residual > RESIDUAL_TOLERANCE * max(op.l2(F), np.finfo(float).tiny):
        logger.warning("resolvent residual %.3e exceeds tolerance (A=%g, k=%d, lam=%g)", residual, A, k, lam)
    return f


@dataclass(frozen=True)
class LambdaSpec:
    negative_extent: float = 1.0
    positive_extent: float = 1.0
    points_per_regime: int = 12
    refine: bool = True

    def __post_init__(self) -> None:
        if self.points_per_regime < 10:
            raise LinearAnalysisError("各領域に少なくとも 10 点が必要です")
        if self.negative_extent <= 0.0 or self.positive_extent <= 0.0:
            raise LinearAnalysisError("lambda の範囲は正である必要があります")

    def grid(self) -> np.ndarray:
        n = self.points_per_regime
        negative = np.linspace(-self.negative_extent, 0.0, n + 1)[:-1]
        # [0, 1] は両端（壁と中心の臨界層）に寄せて配置する
        critical = 0.5 * (1.0 - np.cos(np.pi * np.arange(n) / (n - 1)))
        positive = np.linspace(1.0, 1.0 + self.positive_extent, n + 1)[1:]
        return np.concatenate([negative, critical, positive])


def regime_of(lam: float) -> str:
    if lam < 0.0:
        return REGIME_NEGATIVE
    if lam <= 1.0:
        return REGIME_CRITICAL
    return REGIME_POSITIVE


@dataclass
class ResolventScan:
    A: float
    k: int
    ny: int
    lambdas: list[float] = field(default_factory=list)
    sigma: list[float] = field(default_factory=list)
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error and bool(self.sigma)

    @property
    def argmax_index(self) -> int:
        return int(np.argmin(self.sigma))

    @property
    def sigma_min(self) -> float:
        return float(min(self.sigma))

    @property
    def lambda_star(self) -> float:
        return self.lambdas[self.argmax_index]

    @property
    def regime_star(self) -> str:
        return regime_of(self.lambda_star)

    @property
    def resolvent_sup(self) -> float:
        """sup_lambda |f| / |F|."""

        return 1.0 / self.sigma_min

    @property
    def c_emp(self) -> float:
        return abs(self.k) ** 0.5 / math.sqrt(self.A) / self.sigma_min

    def rows(self) -> list[tuple]:
        order = np.argsort(self.lambdas, kind="stable")
        return [(self.A, self.k, self.lambdas[i], self.sigma[i], regime_of(self.lambdas[i])) for i in order]

    def summary(self) -> dict:
        if not self.ok:
            return {"A": self.A, "k": self.k, "ny": self.ny, "error": self.error}
        return {
            "A": self.A,
            "k": self.k,
            "ny": self.ny,
            "sigma_min": self.sigma_min,
            "resolvent_sup": self.resolvent_sup,
            "c_emp": self.c_emp,
            "lambda_star": self.lambda_star,
            "regime_star": self.regime_star,
        }


def scan_cell(A: float, k: int, spec: LambdaSpec, ny: int = 128) -> ResolventScan:
    op = OSOperator(A=A, k=k, ny=ny)
    scan = ResolventScan(A=A, k=k, ny=ny)
    for lam in spec.grid():
        scan.lambdas.append(float(lam))
        scan.sigma.append(op.sigma_min(k * lam))
    if spec.refine:
        _refine_scan(op, scan)
    return scan


def scan_resolvent(
    A_list: list[float],
    k_list: list[int],
    spec: LambdaSpec,
    ny: int = 128,
    ny_max: int = 512,
    converge: bool = False,
) -> list[ResolventScan]:
    if not A_list or not k_list:
        raise LinearAnalysisError("A と k のリストは空にできません")
    results = []
    for A in A_list:
        for k in k_list:
            try:
                scan = converged_scan(A, k, spec, ny, ny_max) if converge else scan_cell(A, k, spec, ny)
            except (LinearAnalysisError, linalg.LinAlgError) as exc:
                logger.warning("resolvent scan failed for A=%g k=%d: %s", A, k, exc)
                scan = ResolventScan(A=A, k=k, ny=ny, error=str(exc))
            results.append(scan)
    return results


def converged_scan(A: float, k: int, spec: LambdaSpec, ny: int = 128, ny_max: int = 512) -> ResolventScan:
    """Double ny until sigma_min changes by less than 1 %."""

    scan = scan_cell(A, k, spec, ny)
    while ny * 2 <= ny_max:
        ny *= 2
        finer = scan_cell(A, k, spec, ny)
        change = abs(finer.sigma_min - scan.sigma_min) / finer.sigma_min
        scan = finer
        if change < CONVERGENCE_CHANGE:
            break
        logger.info("A=%g k=%d: sigma_min changed %.2f%% at ny=%d", A, k, 100 * change, ny)
    return scan


# Pseudospectral bound --------------------------------------------------------
@dataclass(frozen=True)
class PsiResult:
    A: float
    k: int
    psi: float
    mu_star: float
    mu_grid: tuple[float, ...]
    sigma_grid: tuple[float, ...]
    widened: bool
    c_prime: float | None = None

    @property
    def bound(self) -> float | None:
        if self.c_prime is None:
            return None
        return self.c_prime * abs(self.k) ** 0.5 / math.sqrt(self.A) + self.k**2 / self.A

    @property
    def bound_holds(self) -> bool | None:
        bound = self.bound
        return None if bound is None else self.psi >= bound

    def summary(self) -> dict:
        return {
            "A": self.A,
            "k": self.k,
            "psi": self.psi,
            "mu_star": self.mu_star,
            "widened": self.widened,
            "c_prime": self.c_prime,
            "bound": self.bound,
            "bound_holds": self.bound_holds,
        }


def compute_psi(
    A: float,
    k: int,
    mu_points: int = 81,
    ny: int = 128,
    c_prime: float | None = None,
    nonlocal_term: bool = False,
) -> PsiResult:
    """Psi = min over real mu of sigma_min(L - i mu); coarse grid then golden-section refinement."""

    op = OSOperator(A=A, k=k, ny=ny, nonlocal_term=nonlocal_term)
    extent = 2.0 * abs(k)
    widened = False
    for attempt in range(2):
        mus = np.linspace(-extent, extent, mu_points)
        sigmas = np.array([op.sigma_min(mu) for mu in mus])
        i = int(np.argmin(sigmas))
        if 0 < i < len(mus) - 1:
            break
        if attempt == 0:
            logger.info("Psi minimum on grid edge (A=%g, k=%d); widening", A, k)
            extent *= 2.0
            widened = True
    else:
        raise PsiGridError(f"Psi の最小点が拡大後の格子端にあります (A={A}, k={k})")

    psi, mu_star = float(sigmas[i]), float(mus[i])
    try:
        result = minimize_scalar(op.sigma_min, bracket=(mus[i - 1], mus[i], mus[i + 1]), method="golden", tol=1e-10)
    except ValueError as exc:
        # 平坦な区間では黄金分割の囲い込みが成立しないので格子最小値を使う
        logger.debug("golden refinement skipped (A=%g, k=%d): %s", A, k, exc)
        result = None
    if result is not None and result.fun < sigmas[i]:
        psi, mu_star = float(result.fun), float(result.x)
    return PsiResult(
        A=A,
        k=k,
        psi=psi,
        mu_star=mu_star,
        mu_grid=tuple(float(m) for m in mus),
        sigma_grid=tuple(float(s) for s in sigmas),
        widened=widened,
        c_prime=c_prime,
    )


# Semigroup decay -------------------------------------------------------------
@dataclass
class DecayFit:
    A: float
    k: int
    nonlocal_term: bool
    times: np.ndarray
    log_norms: np.ndarray
    rate: float
    prefactor: float
    rate_half_width: float
    fit_residual: float
    tail_start: float

    @property
    def norms(self) -> np.ndarray:
        return np.exp(self.log_norms)

    @property
    def diffusive_rate(self) -> float:
        return (math.pi / 2.0) ** 2 / self.A

    @property
    def enhancement(self) -> float:
        return self.rate / self.diffusive_rate

    @property
    def c_prime(self) -> float:
        return (self.rate - self.k**2 / self.A) * math.sqrt(self.A) / abs(self.k) ** 0.5

    def semigroup_bound_holds(self, psi: float) -> bool:
        """Check |e^{-tL}| <= exp(-t psi + pi/2) on every sample."""

        return bool(np.all(self.log_norms <= -self.times * psi + math.pi / 2.0 + 1e-9))

    def rows(self) -> list[tuple]:
        return [(self.A, self.k, float(t), float(v)) for t, v in zip(self.times, self.log_norms)]

    def summary(self) -> dict:
        return {
            "A": self.A,
            "k": self.k,
            "nonlocal": self.nonlocal_term,
            "rate": self.rate,
            "rate_half_width": self.rate_half_width,
            "prefactor": self.prefactor,
            "fit_residual": self.fit_residual,
            "tail_start": self.tail_start,
            "diffusive_rate": self.diffusive_rate,
            "enhancement": self.enhancement,
            "c_prime": self.c_prime,
        }


def default_decay_times(A: float, k: int, horizon: float = 25.0, samples: int = 101) -> np.ndarray:
    return np.linspace(0.0, horizon * math.sqrt(A / abs(k)), samples)


def propagator_log_norms(B: np.ndarray, times: np.ndarray) -> np.ndarray:
    """log |exp(-t B)|_2 at each time, renormalizing the running propagator."""

    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0 or times[0] < 0.0 or np.any(np.diff(times) <= 0.0):
        raise LinearAnalysisError("時刻列は非負かつ狭義単調増加である必要があります")

    n = B.shape[0]
    steps = np.diff(np.concatenate([[0.0], times]))
    uniform = steps.size > 1 and np.allclose(steps[1:], steps[1], rtol=1e-12, atol=0.0)
    cached_step = linalg.expm(-steps[1] * B) if uniform else None

    current = np.eye(n, dtype=complex)
    log_scale = 0.0
    out = np.empty(times.size)
    for i, h in enumerate(steps):
        if h > 0.0:
            factor = cached_step if (cached_step is not None and i > 0) else linalg.expm(-h * B)
            current = factor @ current
        norm = float(np.linalg.norm(current, 2))
        if norm == 0.0 or not math.isfinite(norm):
            raise LinearAnalysisError(f"伝播行列のノルムが不正です (t={times[i]})")
        # 桁あふれを避けるため正規化してスケールを対数で持ち回す
        log_scale += math.log(norm)
        current = current / norm
        out[i] = log_scale
    return out


def measure_semigroup_decay(
    A: float,
    k: int,
    t_samples: np.ndarray | None = None,
    ny: int = 128,
    nonlocal_term: bool = False,
    tail_fraction: float = 0.5,
) -> DecayFit:
    op = OSOperator(A=A, k=k, ny=ny, nonlocal_term=nonlocal_term)
    times = default_decay_times(A, k) if t_samples is None else np.asarray(t_samples, dtype=float)
    log_norms = propagator_log_norms(op.weighted, times)

    tail_start = float(times[0] + tail_fraction * (times[-1] - times[0]))
    tail = times >= tail_start
    if np.count_nonzero(tail) < 3:
        raise LinearAnalysisError("裾のサンプルが 3 点未満でフィットできません")
    fit = linregress(times[tail], log_norms[tail])
    predicted = fit.intercept + fit.slope * times[tail]
    dof = int(np.count_nonzero(tail)) - 2
    half_width = float(student_t.ppf(0.975, dof) * fit.stderr)
    return DecayFit(
        A=A,
        k=k,
        nonlocal_term=nonlocal_term,
        times=times,
        log_norms=log_norms,
        rate=float(-fit.slope),
        prefactor=float(math.exp(fit.intercept)),
        rate_half_width=half_width,
        fit_residual=float(np.max(np.abs(log_norms[tail] - predicted))),
        tail_start=tail_start,
    )


# Time-space estimate ---------------------------------------------------------
@dataclass(frozen=True)
class ForcingSpec:
    """
    Single-mode forcing f2 = (f2x, f2y) e^{ikx}, steady in time.

    "smooth": f2x = amp (1 - y^2), f2y = amp y (1 - y^2)
    "layer":  f2y = amp exp(-(y / delta)^2) (1 - y^2) with delta = (A|k|)^{-1/4}
    """

    amplitude: float = 0.0
    profile: str = "layer"

    def __post_init__(self) -> None:
        if self.profile not in ("smooth", "layer"):
            raise LinearAnalysisError(f"未知の forcing プロファイルです: {self.profile}")

    def components(self, y: np.ndarray, A: float, k: int) -> tuple[np.ndarray, np.ndarray]:
        wall = 1.0 - y**2
        if self.profile == "smooth":
            return self.amplitude * wall, self.amplitude * y * wall
        delta = (A * abs(k)) ** -0.25
        return np.zeros_like(y), self.amplitude * np.exp(-((y / delta) ** 2)) * wall


@dataclass(frozen=True)
class TimeSpaceReport:
    A: float
    k: int
    nonlocal_term: bool
    a_rate: float
    numerator: float
    denominator: float
    abscissa: float
    weight_exceeds_decay: bool

    @property
    def ratio(self) -> float:
        if self.denominator == 0.0:
            return 0.0
        return self.numerator / self.denominator

    def summary(self) -> dict:
        return {
            "A": self.A,
            "k": self.k,
            "nonlocal": self.nonlocal_term,
            "a_rate": self.a_rate,
            "numerator": self.numerator,
            "denominator": self.denominator,
            "ratio": self.ratio,
            "abscissa": self.abscissa,
            "weight_exceeds_decay": self.weight_exceeds_decay,
        }


def verify_timespace(
    A: float,
    k: int,
    forcing: ForcingSpec,
    a_rate: float,
    f0_amplitude: float = 1.0,
    ny: int = 128,
    horizon: float = 40.0,
    steps: int = 2000,
    nonlocal_term: bool = False,
) -> TimeSpaceReport:
    """
    Integrate (d_t + L) f = div f2 for one mode from f0 = amp sin(pi y) and
    return |f|_{X_a}^2 / (|f0|^2 + A |e^{a A^{-1/2} t} f2|^2_{L^2 L^2}).
    """

    op = OSOperator(A=A, k=k, ny=ny, nonlocal_term=nonlocal_term)
    y = op.y
    T = horizon * math.sqrt(A)
    dt = T / steps
    growth = a_rate / math.sqrt(A)

    abscissa = op.spectral_abscissa()
    exceeds = growth >= abscissa
    if exceeds:
        logger.warning(
            "X_a weight %.3e >= decay abscissa %.3e (A=%g, k=%d); ratio grows with the horizon",
            growth,
            abscissa,
            A,
            k,
        )

    f2x, f2y = forcing.components(y, A, k)
    source = 1j * k * f2x + op.D1 @ f2y
    B = op.weighted
    P = linalg.expm(-dt * B)
    # 定常な強制項に対する厳密な積分: B^{-1}(I - P) s
    forced_step = linalg.solve(B, (np.eye(B.shape[0]) - P) @ op.to_weighted(source))

    f = f0_amplitude * np.sin(np.pi * y).astype(complex)
    f[0] = f[-1] = 0.0
    vec = op.to_weighted(f)
    acc = XaAccumulator(a_rate=a_rate, A=A)
    for n in range(steps + 1):
        if n > 0:
            vec = P @ vec + forced_step
        profile = op.from_weighted(vec)
        acc = update_xa_values(acc, n * dt, _mode_l2_squared(op, profile), _mode_grad_squared(op, profile))

    forcing_sq = _mode_weight * (np.dot(op.weights, np.abs(f2x) ** 2) + np.dot(op.weights, np.abs(f2y) ** 2))
    if growth > 0.0:
        time_integral = (math.exp(2.0 * growth * T) - 1.0) / (2.0 * growth)
    else:
        time_integral = T
    f0_sq = _mode_l2_squared(op, f)
    denominator = float(f0_sq + A * forcing_sq * time_integral)
    numerator = acc.squared if (f0_sq > 0.0 or forcing_sq > 0.0) else 0.0
    return TimeSpaceReport(
        A=A,
        k=k,
        nonlocal_term=nonlocal_term,
        a_rate=a_rate,
        numerator=float(numerator),
        denominator=denominator,
        abscissa=abscissa,
        weight_exceeds_decay=exceeds,
    )


# Fits ------------------------------------------------------------------------
@dataclass(frozen=True)
class LogLogFit:
    slope: float
    intercept: float
    half_width: float
    rvalue: float
    points: int

    def within(self, target: float, tolerance: float) -> bool:
        return abs(self.slope - target) <= tolerance

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "half_width": self.half_width,
            "rvalue": self.rvalue,
            "points": self.points,
        }


def fit_loglog(x: list[float], y: list[float]) -> LogLogFit:
    x_arr = np.log(np.asarray(x, dtype=float))
    y_arr = np.log(np.asarray(y, dtype=float))
    if x_arr.size < 2:
        raise LinearAnalysisError("log-log フィットには 2 点以上必要です")
    fit = linregress(x_arr, y_arr)
    dof = x_arr.size - 2
    half_width = float(student_t.ppf(0.975, dof) * fit.stderr) if dof > 0 else math.nan
    return LogLogFit(
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        half_width=half_width,
        rvalue=float(fit.rvalue),
        points=int(x_arr.size),
    )


def spread(values: list[float]) -> float:
    """max / min of positive values."""

    arr = np.asarray(values, dtype=float)
    return float(arr.max() / arr.min())


# Internal helpers ------------------------------------------------------------
# 単一モード e^{ikx} + c.c. の L^2(T x I) ノルムの 2 乗は 4 pi int |f_k|^2 dy
_mode_weight = 4.0 * math.pi


def _mode_l2_squared(op: OSOperator, profile: np.ndarray) -> float:
    return float(_mode_weight * np.dot(op.weights, np.abs(profile) ** 2))


def _mode_grad_squared(op: OSOperator, profile: np.ndarray) -> float:
    dy = op.D1 @ profile
    return float(_mode_weight * np.dot(op.weights, op.k**2 * np.abs(profile) ** 2 + np.abs(dy) ** 2))


def _refine_scan(op: OSOperator, scan: ResolventScan) -> None:
    order = np.argsort(scan.lambdas, kind="stable")
    lams = np.asarray(scan.lambdas)[order]
    sigmas = np.asarray(scan.sigma)[order]
    i = int(np.argmin(sigmas))
    lo = lams[max(i - 1, 0)]
    hi = lams[min(i + 1, len(lams) - 1)]
    if hi <= lo:
        return
    result = minimize_scalar(lambda lam: op.sigma_min(op.k * lam), bounds=(lo, hi), method="bounded",
                             options={"xatol": 1e-10})
    if result.success and result.fun < sigmas[i]:
        scan.lambdas.append(float(result.x))
        scan.sigma.append(float(result.fun))
