"""
Deviation Service

Finite-n tail-probability exponent bounds, large-deviation rates and
moderate-deviation rates, all computed from a CGF profile with a number of
profile evaluations that does not depend on n.
"""

import logging
from typing import Optional

import numpy as np
from scipy import optimize

from qhmm.config import Settings
from qhmm.models.reports import ModerateDeviationReport, TailBoundReport, TailDirection
from qhmm.services.cgf_service import CgfProfile, minimize_on_grid
from qhmm.services.variance_service import VarianceService, ZeroVarianceError

logger = logging.getLogger(__name__)


class WrongSideError(ValueError):
    """Raised when a level lies on the wrong side of the mean for the requested tail."""
    pass


class DeviationService:
    """
    Service for tail bounds and deviation rates.

    Features:
    - Lower exponent bound: sup over the tilt half-line of n theta a - n phi - upper delta
    - Upper exponent bound: infimum over (s, theta) of the Renyi-Bregman form
    - Feasibility probing for the upper bound
    - Large and moderate deviation rates
    """

    def __init__(self, settings: Settings, variance_service: Optional[VarianceService] = None):
        self.settings = settings
        self.variance_service = variance_service or VarianceService(settings)

    @staticmethod
    def _direction(direction) -> TailDirection:
        return TailDirection(direction)

    def _check_side(self, profile: CgfProfile, a: float, direction: TailDirection) -> float:
        mean = profile.phi_prime(0.0)
        if direction.sign * (a - mean) <= 0:
            raise WrongSideError(
                f"Level {a} is not on the {direction.value} side of the mean {mean}"
            )
        return mean

    def exponent_lower_bound_at(
        self, profile: CgfProfile, a: float, n: int, direction=TailDirection.UPPER
    ) -> tuple[float, float]:
        """
        Lower bound on -log Pr{X^n >= a} (resp. <= a) and its maximizing theta.

        Returns:
            (value, theta)

        Raises:
            WrongSideError: If a is not beyond the mean in the requested direction
        """
        direction = self._direction(direction)
        self._check_side(profile, a, direction)
        sign = direction.sign
        theta_a = profile.phi_prime_inverse(a)

        def objective(theta: float) -> float:
            return n * theta * a - n * profile.phi(theta) - profile.delta_upper(theta)

        best_theta, best = theta_a, objective(theta_a)
        if best < 0.0:
            best_theta, best = 0.0, 0.0

        high = min(2 * abs(theta_a) + 1.0, 0.5 * profile.theta_limit())
        grid = np.linspace(0.0, high, self.settings.grid_size)
        values = [objective(sign * t) for t in grid]
        index = int(np.argmax(values))
        if values[index] > best:
            best_theta, best = sign * grid[index], values[index]

        lo = grid[max(index - 1, 0)]
        hi = grid[min(index + 1, len(grid) - 1)]
        if hi > lo:
            result = optimize.minimize_scalar(
                lambda t: -objective(sign * t),
                bounds=(lo, hi),
                method="bounded",
                options={"maxiter": self.settings.golden_iterations, "xatol": 1e-12},
            )
            if -result.fun > best:
                best_theta, best = sign * float(result.x), float(-result.fun)
        return best, best_theta

    def exponent_lower_bound(
        self, profile: CgfProfile, a: float, n: int, direction=TailDirection.UPPER
    ) -> float:
        """Lower bound on the tail exponent -log Pr."""
        return self.exponent_lower_bound_at(profile, a, n, direction)[0]

    def upper_objective(
        self, profile: CgfProfile, n: int, s: float, theta: float, theta_a: float
    ) -> float:
        """
        n D_{1+s}(theta || 0) + (1/s)[upper delta((1+s)theta) - (1+s) lower delta(theta)]
        - ((1+s)/s) log(1 - exp(-n D(theta_a || theta) + upper delta(theta_a) - lower delta(theta))).

        +inf where the logarithm's argument is not positive.
        """
        exponent = self._feasibility_exponent(profile, n, theta, theta_a)
        if exponent >= 0:
            return np.inf
        return (
            n * profile.renyi_bregman(s, theta, 0.0)
            + (profile.delta_upper((1 + s) * theta) - (1 + s) * profile.delta_lower(theta)) / s
            - (1 + s) / s * np.log(-np.expm1(exponent))
        )

    def _feasibility_exponent(
        self, profile: CgfProfile, n: int, theta: float, theta_a: float
    ) -> float:
        return (
            -n * profile.bregman(theta_a, theta)
            + profile.delta_upper(theta_a)
            - profile.delta_lower(theta)
        )

    def _offset_bounds(self, theta_a: float) -> tuple[float, float, float]:
        scale = 1.0 + abs(theta_a)
        return scale, -5.0, float(np.log10(2.0))

    def exponent_upper_bound_at(
        self, profile: CgfProfile, a: float, n: int, direction=TailDirection.UPPER
    ) -> tuple[Optional[float], Optional[float], Optional[float]]:
        """
        Upper bound on -log Pr{X^n >= a} (resp. <= a) with its optimizing (s, theta).

        Returns:
            (value, s, theta), all None when no grid point is feasible at this n

        Raises:
            WrongSideError: If a is not beyond the mean in the requested direction
        """
        direction = self._direction(direction)
        self._check_side(profile, a, direction)
        sign = direction.sign
        theta_a = profile.phi_prime_inverse(a)
        scale, u_low, u_high = self._offset_bounds(theta_a)
        limit = profile.theta_limit()

        def objective(log_s: float, log_u: float) -> float:
            s = 10.0**log_s
            theta = theta_a + sign * scale * 10.0**log_u
            if abs((1 + s) * theta) >= limit:
                return np.inf
            return self.upper_objective(profile, n, s, theta, theta_a)

        log_s, log_u, value = minimize_on_grid(
            objective,
            s_bounds=(np.log10(self.settings.s_min), np.log10(self.settings.s_max)),
            u_bounds=(u_low, u_high),
            grid_size=self.settings.grid_size,
            descent_iterations=self.settings.descent_iterations,
            line_iterations=self.settings.golden_iterations,
        )
        if not np.isfinite(value):
            logger.info(f"Upper exponent bound infeasible at n={n}, a={a}")
            return None, None, None
        return float(value), 10.0**log_s, theta_a + sign * scale * 10.0**log_u

    def exponent_upper_bound(
        self, profile: CgfProfile, a: float, n: int, direction=TailDirection.UPPER
    ) -> Optional[float]:
        """Upper bound on the tail exponent -log Pr; None when infeasible at this n."""
        return self.exponent_upper_bound_at(profile, a, n, direction)[0]

    def smallest_feasible_n(
        self, profile: CgfProfile, a: float, n: int, direction=TailDirection.UPPER
    ) -> Optional[int]:
        """
        Smallest n found by doubling from n for which some grid theta makes the upper bound finite.

        Uses only the theta offsets of the optimizer grid, whose profile values are
        already cached after an upper-bound evaluation.
        """
        direction = self._direction(direction)
        theta_a = profile.phi_prime_inverse(a)
        scale, u_low, u_high = self._offset_bounds(theta_a)
        limit = profile.theta_limit()
        thetas = [
            theta_a + direction.sign * scale * 10.0**u
            for u in np.linspace(u_low, u_high, self.settings.grid_size)
        ]
        thetas = [t for t in thetas if abs(t) < limit]
        candidate = n
        for _ in range(self.settings.feasibility_max_doublings):
            if any(self._feasibility_exponent(profile, candidate, t, theta_a) < 0 for t in thetas):
                return candidate
            candidate *= 2
        return None

    def tail_report(
        self, profile: CgfProfile, a: float, n: int, direction=TailDirection.UPPER
    ) -> TailBoundReport:
        """
        Both exponent bounds, the rate function and feasibility for one tail event.

        Raises:
            WrongSideError: If a is not beyond the mean in the requested direction
        """
        direction = self._direction(direction)
        misses_before = profile.cache_misses
        mean = self._check_side(profile, a, direction)
        lower, lower_theta = self.exponent_lower_bound_at(profile, a, n, direction)
        upper, upper_s, upper_theta = self.exponent_upper_bound_at(profile, a, n, direction)
        smallest = n if upper is not None else self.smallest_feasible_n(profile, a, n, direction)
        report = TailBoundReport(
            direction=direction,
            a=a,
            n=n,
            mean=mean,
            exponent_lower_bound=lower,
            lower_theta=lower_theta,
            exponent_upper_bound=upper,
            upper_theta=upper_theta,
            upper_s=upper_s,
            upper_feasible=upper is not None,
            smallest_feasible_n=smallest,
            rate=profile.rate_function(a),
            profile_evaluations=profile.cache_misses - misses_before,
        )
        logger.info(
            f"Tail bounds {direction.value} a={a} n={n}: lower={lower:.6g}, "
            f"upper={upper if upper is None else round(upper, 6)}"
        )
        return report

    def ldp_rate(self, profile: CgfProfile, delta: float, direction=TailDirection.UPPER) -> float:
        """
        sup over the tilt half-line of theta (phi'(0) +- delta) - phi(theta).

        Raises:
            ValueError: If delta is negative
            DegenerateCgfError: If phi is affine
        """
        if delta < 0:
            raise ValueError("delta must be nonnegative")
        if delta == 0:
            return 0.0
        direction = self._direction(direction)
        mean = profile.phi_prime(0.0)
        return profile.rate_function(mean + direction.sign * delta)

    def second_derivative_at_zero(self, profile: CgfProfile) -> float:
        """
        phi''(0) from the fundamental-matrix formula.

        Raises:
            NotIrreducibleError: If the total map is reducible
        """
        return self.variance_service.asymptotic_variance(profile.instrument, require_primitive=False)

    def mdp_rate(self, profile: CgfProfile, delta: float) -> float:
        """
        delta^2 / (2 phi''(0)).

        Raises:
            ZeroVarianceError: If phi''(0) vanishes
        """
        if delta == 0:
            return 0.0
        variance = self.second_derivative_at_zero(profile)
        if variance <= self.settings.strict_convexity_tol:
            raise ZeroVarianceError(f"Asymptotic variance {variance:.3e} is zero; no moderate deviation rate")
        return delta**2 / (2 * variance)

    def mdp_exponent_bounds(
        self,
        profile: CgfProfile,
        delta: float,
        t: float,
        n: int,
        direction=TailDirection.UPPER,
    ) -> ModerateDeviationReport:
        """
        Both exponent bounds at the moderate level phi'(0) +- n^{-t} delta, scaled by n^{2t-1}.

        Raises:
            ValueError: If t is not in (0, 1/2) or delta <= 0
        """
        if not 0 < t < 0.5:
            raise ValueError("t must lie in (0, 1/2)")
        if delta <= 0:
            raise ValueError("delta must be positive")
        direction = self._direction(direction)
        mean = profile.phi_prime(0.0)
        level = mean + direction.sign * delta * n ** (-t)
        scale = n ** (2 * t - 1)
        lower = self.exponent_lower_bound(profile, level, n, direction)
        upper = self.exponent_upper_bound(profile, level, n, direction)
        return ModerateDeviationReport(
            delta=delta,
            t=t,
            n=n,
            direction=direction,
            level=level,
            rate=self.mdp_rate(profile, delta),
            scaled_lower=lower * scale,
            scaled_upper=None if upper is None else upper * scale,
            upper_feasible=upper is not None,
        )
