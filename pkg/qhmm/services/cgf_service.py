"""
CGF Service

The cumulant generating function phi(theta) = log lambda_theta of the observed
sum, its derivatives, the finite-n correction terms and the divergences built
on top of it.
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, Optional

import numpy as np
from scipy import optimize

from qhmm.config import Settings
from qhmm.core.operators import DensityOperator, unvec, vec
from qhmm.models.instrument import Instrument
from qhmm.models.reports import PerronFrobeniusData
from qhmm.services.perron_frobenius_service import NotIrreducibleError, PerronFrobeniusService

logger = logging.getLogger(__name__)


class DegenerateCgfError(ValueError):
    """Raised when phi is affine, so phi' cannot be inverted."""
    pass


class UnreachableLevelError(ValueError):
    """Raised when a level lies outside the range of phi'."""
    pass


class CgfProfile:
    """
    CGF of one instrument and initial state, with a per-theta eigendata cache.

    The cache is keyed by the exact theta value. Lookups and inserts happen under
    a lock; eigendata is computed outside it, so concurrent readers never block
    on a computation. cache_misses counts distinct eigendata computations.
    """

    def __init__(
        self,
        instrument: Instrument,
        settings: Settings,
        state: Optional[DensityOperator] = None,
        pf_service: Optional[PerronFrobeniusService] = None,
    ):
        self.instrument = instrument
        self.settings = settings
        self.state = state if state is not None else instrument.state()
        self.pf_service = pf_service or PerronFrobeniusService(settings)
        self.step = settings.fd_step
        self._cache: dict[float, PerronFrobeniusData] = {}
        self._lock = threading.Lock()
        self.cache_misses = 0

    def eigendata(self, theta: float) -> PerronFrobeniusData:
        """Cached pf_eigendata(instrument, theta)."""
        theta = float(theta)
        with self._lock:
            cached = self._cache.get(theta)
        if cached is not None:
            return cached
        data = self.pf_service.pf_eigendata(self.instrument, theta)
        with self._lock:
            if theta not in self._cache:
                self._cache[theta] = data
                self.cache_misses += 1
            return self._cache[theta]

    def prefetch(self, thetas: Iterable[float]) -> None:
        """Fill the cache for many theta values, using up to settings.threads workers."""
        pending = [float(t) for t in thetas]
        with ThreadPoolExecutor(max_workers=self.settings.threads) as executor:
            list(executor.map(self.eigendata, pending))

    def phi(self, theta: float) -> float:
        """phi(theta) = log lambda_theta."""
        return float(np.log(self.eigendata(theta).lam))

    def deltas(self, theta: float) -> tuple[float, float]:
        """
        (upper delta, lower delta) = (log Tr A_theta rho, log Tr A_theta rho - log ||A_theta||).

        Clamped to upper >= 0 >= lower, which holds exactly since min-eig(A_theta) = 1.
        A clamp larger than zero_margin is logged as a warning, smaller ones at debug.
        """
        data = self.eigendata(theta)
        trace = float(np.sum(data.a_op.matrix * self.state.matrix.T).real)
        raw_upper = float(np.log(trace))
        upper = max(raw_upper, 0.0)
        raw_lower = upper - float(np.log(data.a_norm))
        lower = min(raw_lower, 0.0)
        for name, raw, clamped in (("upper", raw_upper, upper), ("lower", raw_lower, lower)):
            if raw != clamped:
                report = logger.warning if abs(raw) > self.settings.zero_margin else logger.debug
                report(f"Clamped {name} delta at theta={theta} from {raw:.3e} to 0")
        return upper, lower

    def delta_upper(self, theta: float) -> float:
        """Upper correction term at theta."""
        return self.deltas(theta)[0]

    def delta_lower(self, theta: float) -> float:
        """Lower correction term at theta."""
        return self.deltas(theta)[1]

    def finite_n_cgf_bounds(self, theta: float, n: int) -> tuple[float, float]:
        """(n phi + lower delta, n phi + upper delta), which sandwich log Tr Lambda_theta^n(rho)."""
        if n < 1:
            raise ValueError("n must be at least 1")
        phi = self.phi(theta)
        upper, lower = self.deltas(theta)
        return n * phi + lower, n * phi + upper

    def phi_prime(self, theta: float) -> float:
        """
        Hellmann-Feynman derivative Tr A Lambda'_theta(rho_theta) / (lambda Tr A rho_theta).

        The eigenvector pair is renormalized through the denominator, so the value
        does not depend on the Tr A rho = 1 convention.
        """
        data = self.eigendata(theta)
        derivative = self.pf_service.instruments.derivative_map(self.instrument, theta)
        d = self.instrument.dim
        image = unvec(derivative.matrix @ vec(data.rho.matrix), d)
        numerator = float(np.sum(data.a_op.matrix * image.T).real)
        return numerator / (data.lam * data.trace_a_rho)

    def phi_double_prime(self, theta: float) -> float:
        """Central second difference of phi with step h, Richardson-refined once."""
        h = self.step

        def second_difference(step: float) -> float:
            return (self.phi(theta + step) - 2 * self.phi(theta) + self.phi(theta - step)) / step**2

        coarse = second_difference(h)
        fine = second_difference(h / 2)
        return (4 * fine - coarse) / 3

    def spectral_gap(self, theta: float) -> float:
        """1 - |second eigenvalue| / lambda_theta of the tilted map."""
        return self.eigendata(theta).spectral_gap

    def _max_abs_value(self) -> float:
        return float(np.max(np.abs(self.instrument.values)))

    def theta_limit(self) -> float:
        """Largest |theta| allowed by the overflow guard."""
        largest = self._max_abs_value()
        return np.inf if largest == 0 else self.settings.overflow_guard / largest

    def phi_prime_inverse(self, a: float) -> float:
        """
        theta* with phi'(theta*) = a.

        Bracket expansion (doubling) on the side of a, then Brent root finding on
        the monotone phi'.

        Raises:
            DegenerateCgfError: If phi' does not move away from phi'(0)
            UnreachableLevelError: If a lies outside the range of phi', including
                levels at or beyond the extreme outcome values
        """
        mean = self.phi_prime(0.0)
        tol = self.settings.inverse_tol
        if abs(a - mean) <= tol * max(1.0, abs(a)):
            return 0.0
        values = self.instrument.values
        lowest, highest = float(np.min(values)), float(np.max(values))
        if not lowest < a < highest:
            raise UnreachableLevelError(
                f"Level {a} is outside the open interval ({lowest}, {highest}) of outcome values"
            )
        sign = 1.0 if a > mean else -1.0
        limit = self.theta_limit()

        start = min(1.0, limit / 2)
        slope = sign * (self.phi_prime(sign * start) - mean)
        if slope <= self.settings.strict_convexity_tol * start:
            raise DegenerateCgfError(
                f"phi is affine near 0 (phi' moved by {slope:.3e}); phi' cannot be inverted"
            )

        def gap(t: float) -> float:
            return sign * (self.phi_prime(sign * t) - a)

        def bracket_gap(t: float) -> float:
            try:
                return gap(t)
            except NotIrreducibleError as e:
                raise UnreachableLevelError(
                    f"Level {a} is not reached before the tilted eigenvector loses positivity "
                    f"at theta={sign * t}"
                ) from e

        low, high = 0.0, start
        while bracket_gap(high) < 0:
            low, high = high, 2 * high
            if high > limit:
                raise UnreachableLevelError(
                    f"Level {a} is outside the range of phi' reachable within the overflow guard"
                )

        root = optimize.brentq(
            gap,
            low,
            high,
            xtol=tol,
            rtol=4 * np.finfo(float).eps,
            maxiter=self.settings.inverse_max_iter,
        )
        logger.debug(f"phi_prime_inverse({a}) = {sign * root}")
        return sign * root

    def bregman(self, theta: float, theta_bar: float) -> float:
        """D(theta || theta_bar) = (theta - theta_bar) phi'(theta) - phi(theta) + phi(theta_bar)."""
        if theta == theta_bar:
            return 0.0
        return (theta - theta_bar) * self.phi_prime(theta) - self.phi(theta) + self.phi(theta_bar)

    def renyi_bregman(self, s: float, theta: float, theta_bar: float) -> float:
        """
        D_{1+s}(theta || theta_bar) = [phi((1+s)theta - s theta_bar) - (1+s)phi(theta) + s phi(theta_bar)] / s.

        Raises:
            ValueError: If s <= 0
        """
        if s <= 0:
            raise ValueError("s must be positive")
        if theta == theta_bar:
            return 0.0
        return (
            self.phi((1 + s) * theta - s * theta_bar)
            - (1 + s) * self.phi(theta)
            + s * self.phi(theta_bar)
        ) / s

    def rate_function(self, a: float) -> float:
        """
        theta* a - phi(theta*) with theta* = phi'^{-1}(a); 0 at a = phi'(0).

        Raises:
            DegenerateCgfError, UnreachableLevelError: As phi_prime_inverse
        """
        theta = self.phi_prime_inverse(a)
        if theta == 0.0:
            return 0.0
        return theta * a - self.phi(theta)

    def infimum_form(self, a: float) -> float:
        """
        inf over s > 0 and theta beyond phi'^{-1}(a) of [phi((1+s)theta) - (1+s)phi(theta)] / s.

        Evaluated on a log-spaced (s, offset) grid followed by coordinate descent.
        """
        theta_a = self.phi_prime_inverse(a)
        if theta_a == 0.0:
            return 0.0
        sign = 1.0 if theta_a > 0 else -1.0
        scale = 1.0 + abs(theta_a)
        limit = self.theta_limit()

        def objective(log_s: float, log_u: float) -> float:
            s, theta = 10.0**log_s, theta_a + sign * scale * 10.0**log_u
            if abs((1 + s) * theta) >= limit:
                return np.inf
            return (self.phi((1 + s) * theta) - (1 + s) * self.phi(theta)) / s

        _, _, value = minimize_on_grid(
            objective,
            s_bounds=(-7.0, 1.0),
            u_bounds=(-9.0, 0.0),
            grid_size=self.settings.grid_size,
            descent_iterations=self.settings.descent_iterations,
            line_iterations=self.settings.golden_iterations,
        )
        return value


def minimize_on_grid(
    objective,
    s_bounds: tuple[float, float],
    u_bounds: tuple[float, float],
    grid_size: int,
    descent_iterations: int,
    line_iterations: int,
) -> tuple[float, float, float]:
    """
    Minimize f(x, y) over a box: full grid, then coordinate descent with bounded line searches.

    The number of objective evaluations depends only on the three counts.

    Returns:
        (x*, y*, f(x*, y*)); f is +inf everywhere if no finite value was found
    """
    xs = np.linspace(s_bounds[0], s_bounds[1], grid_size)
    ys = np.linspace(u_bounds[0], u_bounds[1], grid_size)
    best = (xs[0], ys[0], np.inf)
    for x in xs:
        for y in ys:
            value = objective(x, y)
            if value < best[2]:
                best = (x, y, value)
    if not np.isfinite(best[2]):
        return best

    x, y, value = best
    options = {"maxiter": line_iterations, "xatol": 1e-10}
    for _ in range(descent_iterations):
        previous = value
        result = optimize.minimize_scalar(
            lambda t: objective(t, y), bounds=s_bounds, method="bounded", options=options
        )
        if result.fun < value:
            x, value = float(result.x), float(result.fun)
        result = optimize.minimize_scalar(
            lambda t: objective(x, t), bounds=u_bounds, method="bounded", options=options
        )
        if result.fun < value:
            y, value = float(result.x), float(result.fun)
        if previous - value <= 1e-14 * max(1.0, abs(value)):
            break
    return x, y, value


class CgfService:
    """Factory for CGF profiles sharing one Perron-Frobenius service."""

    def __init__(self, settings: Settings, pf_service: Optional[PerronFrobeniusService] = None):
        self.settings = settings
        self.pf_service = pf_service or PerronFrobeniusService(settings)

    def profile(self, instr: Instrument, state: Optional[DensityOperator] = None) -> CgfProfile:
        """
        Build a profile for a valid instrument.

        Raises:
            InvalidInstrumentError: If the instrument is invalid
        """
        self.pf_service.instruments.require_valid(instr)
        return CgfProfile(instr, self.settings, state=state, pf_service=self.pf_service)
