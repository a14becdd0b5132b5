"""
Test suite for Deviation Service

Tests cover:
- Exponent bounds sandwiching the exact tail probability
- Convergence of the normalized bounds to the rate function
- Tail direction handling, mirroring under negated values and wrong-side rejection
- Feasibility of the upper bound and tail reports
- Large and moderate deviation rates
"""

import math

import numpy as np
import pytest

from qhmm.models.reports import TailDirection
from qhmm.services.deviation_service import WrongSideError
from qhmm.services.instrument_service import InstrumentService
from qhmm.services.variance_service import ZeroVarianceError

COIN_RATE = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
LDP_SIZES = (20, 50, 100, 500, 1000)


class TestTailSandwich:
    """Test lower bound <= -log Pr <= upper bound against the exact oracle."""

    @pytest.mark.parametrize("fixture_name, a", [("coin", 0.7), ("qubit", 0.6), ("chain", 1.5)])
    def test_bounds_bracket_exact_tail(self, request, cgf_service, deviation_service, simulation_service, fixture_name, a):
        """Both bounds hold for n = 8..14 whenever the upper bound is feasible."""
        instr = request.getfixturevalue(fixture_name)
        profile = cgf_service.profile(instr)
        for n in range(8, 15):
            exact = -math.log(simulation_service.exact_tail(instr, instr.state(), n, a))
            lower = deviation_service.exponent_lower_bound(profile, a, n)
            upper = deviation_service.exponent_upper_bound(profile, a, n)
            assert lower <= exact + 1e-9
            if upper is not None:
                assert exact <= upper + 1e-9

    def test_lower_tail(self, cgf_service, deviation_service, simulation_service, chain):
        """The lower tail Pr{X^n <= a} is bracketed the same way."""
        profile = cgf_service.profile(chain)
        for n in (6, 10, 14):
            exact = -math.log(simulation_service.exact_tail(chain, chain.state(), n, 0.5, TailDirection.LOWER))
            lower = deviation_service.exponent_lower_bound(profile, 0.5, n, TailDirection.LOWER)
            assert lower <= exact + 1e-9

    def test_lower_bound_never_negative(self, cgf_service, deviation_service, chain):
        """theta = 0 always gives zero, so the supremum is nonnegative."""
        profile = cgf_service.profile(chain)
        assert deviation_service.exponent_lower_bound(profile, 1.01, 1) >= 0.0


class TestRateConvergence:
    """Test that the normalized bounds approach the rate function."""

    def test_coin_lower_bound_is_chernoff(self, cgf_service, deviation_service, coin):
        """With no correction term the lower bound is exactly n I(a)."""
        profile = cgf_service.profile(coin)
        for n in (20, 100, 1000):
            assert deviation_service.exponent_lower_bound(profile, 0.75, n) / n == pytest.approx(COIN_RATE, abs=1e-9)

    def test_upper_gap_shrinks(self, cgf_service, deviation_service, coin):
        """upper / n - I(a) decreases along n = 20, 50, 100, 500, 1000."""
        profile = cgf_service.profile(coin)
        gaps = [deviation_service.exponent_upper_bound(profile, 0.75, n) / n - COIN_RATE for n in LDP_SIZES]
        assert all(gap > 0 for gap in gaps)
        assert all(later < earlier for earlier, later in zip(gaps, gaps[1:]))

    def test_chain_upper_gap_shrinks(self, cgf_service, deviation_service, chain):
        """On the chain, upper / n - I(a) is positive and decreases over the feasible sizes."""
        profile = cgf_service.profile(chain)
        rate = profile.rate_function(1.5)
        bounds = [(n, deviation_service.exponent_upper_bound(profile, 1.5, n)) for n in LDP_SIZES]
        gaps = [upper / n - rate for n, upper in bounds if upper is not None]
        assert len(gaps) >= 3
        assert all(gap > 0 for gap in gaps)
        assert all(later < earlier for earlier, later in zip(gaps, gaps[1:]))

    def test_chain_lower_bound_tightness(self, cgf_service, deviation_service, chain):
        """|lower / n - I(a)| <= (|upper delta(theta*)| + 1) / n."""
        profile = cgf_service.profile(chain)
        rate = profile.rate_function(1.5)
        for n in LDP_SIZES:
            lower, theta = deviation_service.exponent_lower_bound_at(profile, 1.5, n)
            assert abs(lower / n - rate) <= (abs(profile.delta_upper(theta)) + 1) / n

    def test_chain_lower_bound_below_rate(self, cgf_service, deviation_service, chain):
        """The correction term only lowers the bound: lower <= n I(a)."""
        profile = cgf_service.profile(chain)
        rate = profile.rate_function(1.5)
        for n in (10, 100):
            assert deviation_service.exponent_lower_bound(profile, 1.5, n) <= n * rate + 1e-9


class TestDirections:
    """Test tail direction handling."""

    def test_wrong_side_upper(self, cgf_service, deviation_service, coin):
        """An upper tail below the mean is rejected."""
        with pytest.raises(WrongSideError):
            deviation_service.exponent_lower_bound(cgf_service.profile(coin), 0.3, 10)

    def test_wrong_side_lower(self, cgf_service, deviation_service, coin):
        """A lower tail above the mean is rejected."""
        with pytest.raises(WrongSideError):
            deviation_service.tail_report(cgf_service.profile(coin), 0.7, 10, "lower")

    def test_level_at_mean_rejected(self, cgf_service, deviation_service, coin):
        """a = phi'(0) is on neither side."""
        with pytest.raises(WrongSideError):
            deviation_service.exponent_upper_bound(cgf_service.profile(coin), 0.5, 10)

    @pytest.mark.parametrize("a, n", [(0.5, 10), (0.3, 40), (0.5, 200)])
    def test_lower_tail_mirrors_negated_values(self, cgf_service, deviation_service, a, n):
        """Lower-tail bounds at a equal upper-tail bounds at -a with every value negated."""
        transition = np.array([[0.9, 0.2], [0.1, 0.8]])
        values = np.array([[i + 2 * j for j in range(2)] for i in range(2)], dtype=float)
        original = cgf_service.profile(InstrumentService.embed_stochastic_matrix(transition, values))
        negated = cgf_service.profile(InstrumentService.embed_stochastic_matrix(transition, -values))

        lower = deviation_service.exponent_lower_bound(original, a, n, TailDirection.LOWER)
        mirrored = deviation_service.exponent_lower_bound(negated, -a, n, TailDirection.UPPER)
        assert lower == pytest.approx(mirrored, rel=1e-9, abs=1e-12)

        upper = deviation_service.exponent_upper_bound(original, a, n, TailDirection.LOWER)
        mirrored_upper = deviation_service.exponent_upper_bound(negated, -a, n, TailDirection.UPPER)
        assert (upper is None) == (mirrored_upper is None)
        if upper is not None:
            assert upper == pytest.approx(mirrored_upper, rel=1e-6)

    def test_coin_symmetry(self, cgf_service, deviation_service, coin):
        """For the fair coin the lower tail at 0.25 mirrors the upper tail at 0.75."""
        profile = cgf_service.profile(coin)
        upper = deviation_service.exponent_lower_bound(profile, 0.75, 40)
        lower = deviation_service.exponent_lower_bound(profile, 0.25, 40, TailDirection.LOWER)
        assert lower == pytest.approx(upper, abs=1e-7)


class TestTailReport:
    """Test tail reports and feasibility probing."""

    def test_report_fields(self, cgf_service, deviation_service, coin):
        """A feasible report carries both bounds and the rate."""
        report = deviation_service.tail_report(cgf_service.profile(coin), 0.75, 100)
        assert report.direction == TailDirection.UPPER
        assert report.mean == pytest.approx(0.5)
        assert report.rate == pytest.approx(COIN_RATE, abs=1e-9)
        assert report.upper_feasible
        assert report.smallest_feasible_n == 100
        assert report.exponent_lower_bound <= report.exponent_upper_bound
        assert report.upper_s > 0
        assert report.lower_theta == pytest.approx(math.log(3), abs=1e-6)

    def test_repeat_uses_cache(self, cgf_service, deviation_service, chain):
        """A second identical report computes no new eigendata."""
        profile = cgf_service.profile(chain)
        first = deviation_service.tail_report(profile, 1.5, 30)
        second = deviation_service.tail_report(profile, 1.5, 30)
        assert first.profile_evaluations > 0
        assert second.profile_evaluations == 0

    def test_smallest_feasible_n(self, cgf_service, deviation_service, chain):
        """Probing by doubling returns a feasible n no smaller than the start."""
        profile = cgf_service.profile(chain)
        smallest = deviation_service.smallest_feasible_n(profile, 1.5, 1)
        assert smallest is not None and smallest >= 1
        assert deviation_service.exponent_upper_bound(profile, 1.5, smallest) is not None

    def test_infeasible_report_names_feasible_n(self, cgf_service, deviation_service, chain):
        """When the upper bound is infeasible the report names a larger feasible n."""
        profile = cgf_service.profile(chain)
        report = deviation_service.tail_report(profile, 1.5, 1)
        if report.upper_feasible:
            assert report.smallest_feasible_n == 1
        else:
            assert report.exponent_upper_bound is None
            assert report.smallest_feasible_n is None or report.smallest_feasible_n > 1


class TestRates:
    """Test large and moderate deviation rates."""

    def test_ldp_rate(self, cgf_service, deviation_service, coin):
        """The coin's rate at delta = 0.25 is KL(0.75 || 0.5) on both sides."""
        profile = cgf_service.profile(coin)
        assert deviation_service.ldp_rate(profile, 0.25) == pytest.approx(COIN_RATE, abs=1e-9)
        assert deviation_service.ldp_rate(profile, 0.25, "lower") == pytest.approx(COIN_RATE, abs=1e-9)
        assert deviation_service.ldp_rate(profile, 0.0) == 0.0

    def test_ldp_rate_rejects_negative(self, cgf_service, deviation_service, coin):
        """delta must be nonnegative."""
        with pytest.raises(ValueError):
            deviation_service.ldp_rate(cgf_service.profile(coin), -0.1)

    def test_mdp_rate_coin(self, cgf_service, deviation_service, coin):
        """delta^2 / (2 phi''(0)) = 2 for the coin at delta = 1."""
        assert deviation_service.mdp_rate(cgf_service.profile(coin), 1.0) == pytest.approx(2.0)

    def test_mdp_rate_chain(self, cgf_service, deviation_service, variance_service, chain):
        """The rate uses the fundamental-matrix variance."""
        variance = variance_service.asymptotic_variance(chain)
        assert deviation_service.mdp_rate(cgf_service.profile(chain), 0.5) == pytest.approx(0.25 / (2 * variance))

    def test_mdp_rate_zero_variance(self, cgf_service, deviation_service, shift):
        """The shift has no moderate deviation rate."""
        with pytest.raises(ZeroVarianceError):
            deviation_service.mdp_rate(cgf_service.profile(shift), 1.0)

    def test_mdp_exponent_bounds(self, cgf_service, deviation_service, coin):
        """Scaled bounds at level phi'(0) + n^-t delta bracket each other."""
        report = deviation_service.mdp_exponent_bounds(cgf_service.profile(coin), 1.0, 0.25, 10000)
        assert report.level == pytest.approx(0.6)
        assert report.rate == pytest.approx(2.0)
        assert report.scaled_lower > 0
        assert report.upper_feasible
        assert report.scaled_lower <= report.scaled_upper

    @pytest.mark.parametrize("t, delta", [(0.0, 1.0), (0.5, 1.0), (0.25, 0.0)])
    def test_mdp_exponent_bounds_validation(self, cgf_service, deviation_service, coin, t, delta):
        """t must lie in (0, 1/2) and delta must be positive."""
        with pytest.raises(ValueError):
            deviation_service.mdp_exponent_bounds(cgf_service.profile(coin), delta, t, 100)
