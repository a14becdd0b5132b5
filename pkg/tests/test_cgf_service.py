"""
Test suite for CGF Service

Tests cover:
- Closed forms of phi and its derivatives on the coin and the unitary mixture
- Finite-n sandwich of the exact CGF by the correction terms, their limit at 0 and clamping
- Convexity of phi and the Hellmann-Feynman derivative against finite differences
- Inverse of phi' and its failure modes
- Bregman and Renyi-Bregman divergences and the rate function
- Eigendata cache and parallel prefetch
- The grid-plus-descent minimizer
"""

import logging
import math
from unittest.mock import patch

import numpy as np
import pytest

from qhmm.config import Settings
from qhmm.core.operators import DensityOperator, HermitianOperator
from qhmm.services.cgf_service import (
    CgfProfile,
    DegenerateCgfError,
    UnreachableLevelError,
    minimize_on_grid,
)
from qhmm.models.instrument import Instrument, Outcome
from qhmm.services.instrument_service import InvalidInstrumentError
from qhmm.services.simulation_service import SimulationService
from qhmm.utils import fixtures

IRREDUCIBLE = ["iid-coin", "shift-d3", "classical-chain", "qubit-unitary-mixture"]
THETAS = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0]


def coin_phi(theta: float) -> float:
    return math.log((1 + math.exp(theta)) / 2)


class TestClosedForms:
    """Test phi against closed forms."""

    @pytest.mark.parametrize("theta", [-2.0, -0.7, 0.0, 0.4, 2.0])
    def test_coin_phi(self, cgf_service, coin, theta):
        """phi(theta) = log((1 + e^theta) / 2)."""
        assert cgf_service.profile(coin).phi(theta) == pytest.approx(coin_phi(theta), abs=1e-12)

    @pytest.mark.parametrize("theta", [-1.0, 0.0, 0.6])
    def test_coin_phi_prime(self, cgf_service, coin, theta):
        """phi'(theta) = e^theta / (1 + e^theta)."""
        expected = math.exp(theta) / (1 + math.exp(theta))
        assert cgf_service.profile(coin).phi_prime(theta) == pytest.approx(expected, abs=1e-12)

    def test_unitary_mixture_derivatives(self, cgf_service, qubit):
        """phi'(0) = 0.4 and phi''(0) = 0.84 for q = 0.7."""
        profile = cgf_service.profile(qubit)
        assert profile.phi_prime(0.0) == pytest.approx(0.4, abs=1e-12)
        assert profile.phi_double_prime(0.0) == pytest.approx(0.84, rel=1e-6)

    def test_shift_is_affine(self, cgf_service, shift):
        """The shift has phi(theta) = theta."""
        profile = cgf_service.profile(shift)
        assert profile.phi(0.8) == pytest.approx(0.8, abs=1e-10)
        assert profile.phi_prime(-0.3) == pytest.approx(1.0, abs=1e-10)

    def test_chain_mean(self, cgf_service, chain):
        """Stationary mean of i + 2j for the chain is 1."""
        assert cgf_service.profile(chain).phi_prime(0.0) == pytest.approx(1.0, abs=1e-12)

    def test_profile_requires_valid_instrument(self, cgf_service):
        """Invalid instruments are rejected up front."""
        leaky = Instrument(dim=1, outcomes=[Outcome(label="a", value=1.0, kraus=[[[0.5]]])])
        with pytest.raises(InvalidInstrumentError):
            cgf_service.profile(leaky)


class TestCorrectionTerms:
    """Test the finite-n correction terms."""

    @pytest.mark.parametrize("name", IRREDUCIBLE)
    def test_exact_cgf_sandwich(self, settings, cgf_service, name):
        """n phi + lower delta <= log Tr Lambda_theta^n(rho) <= n phi + upper delta."""
        instr = fixtures.BUILDERS[name]()
        profile = cgf_service.profile(instr)
        oracle = SimulationService(settings)
        for theta in THETAS:
            for n in range(1, 15):
                exact = oracle.exact_cgf(instr, instr.state(), theta, n)
                lower, upper = profile.finite_n_cgf_bounds(theta, n)
                assert lower - exact <= 1e-9
                assert exact - upper <= 1e-9

    def test_signs(self, cgf_service, chain):
        """upper delta >= 0 >= lower delta."""
        profile = cgf_service.profile(chain)
        for theta in THETAS:
            upper, lower = profile.deltas(theta)
            assert upper >= 0.0 >= lower

    def test_zero_for_scalar_instrument(self, cgf_service, coin):
        """A one-dimensional hidden system has no correction."""
        assert cgf_service.profile(coin).deltas(1.3) == (0.0, 0.0)

    @pytest.mark.parametrize("name", ["classical-chain", "qubit-unitary-mixture"])
    @pytest.mark.parametrize("sign", [1.0, -1.0])
    def test_vanish_as_theta_shrinks(self, cgf_service, name, sign):
        """Both corrections shrink to 0 as theta -> 0 on a hidden system with d >= 2."""
        profile = cgf_service.profile(fixtures.BUILDERS[name]())
        magnitudes = [max(abs(v) for v in profile.deltas(sign * t)) for t in (1e-1, 1e-2, 1e-3, 1e-4)]
        assert all(later <= earlier + 1e-15 for earlier, later in zip(magnitudes, magnitudes[1:]))
        assert magnitudes[-1] <= 1e-2
        assert profile.deltas(0.0) == (0.0, 0.0)

    def test_clamp_is_logged(self, cgf_service, chain, caplog):
        """A sign violation beyond zero_margin is clamped with a warning."""
        profile = cgf_service.profile(chain)
        data = profile.eigendata(0.5)
        shrunk = data.model_copy(update={"a_op": HermitianOperator(matrix=0.1 * data.a_op.matrix)})
        with patch.object(profile, "eigendata", return_value=shrunk):
            with caplog.at_level(logging.WARNING, logger="qhmm.services.cgf_service"):
                upper, _ = profile.deltas(0.5)
        assert upper == 0.0
        assert "Clamped upper delta" in caplog.text

    def test_no_warning_without_clamp(self, cgf_service, chain, caplog):
        """Ordinary evaluations log nothing at warning level."""
        profile = cgf_service.profile(chain)
        with caplog.at_level(logging.WARNING, logger="qhmm.services.cgf_service"):
            for theta in THETAS:
                profile.deltas(theta)
        assert "Clamped" not in caplog.text

    def test_state_dependence(self, cgf_service, chain):
        """Starting in a basis state changes the upper correction."""
        state = DensityOperator.basis(2, 1)
        mixed = cgf_service.profile(chain).delta_upper(1.0)
        pure = cgf_service.profile(chain, state=state).delta_upper(1.0)
        assert pure != pytest.approx(mixed)

    def test_rejects_non_positive_n(self, cgf_service, coin):
        """n must be at least 1."""
        with pytest.raises(ValueError):
            cgf_service.profile(coin).finite_n_cgf_bounds(0.5, 0)


class TestShape:
    """Test convexity of phi and the Hellmann-Feynman derivative."""

    @pytest.mark.parametrize("name", ["classical-chain", "qubit-unitary-mixture"])
    def test_phi_is_convex(self, cgf_service, name):
        """Second divided differences of phi on a grid are >= -1e-8."""
        profile = cgf_service.profile(fixtures.BUILDERS[name]())
        grid = np.linspace(-3.0, 3.0, 61)
        values = np.array([profile.phi(t) for t in grid])
        step = grid[1] - grid[0]
        second = (values[2:] - 2 * values[1:-1] + values[:-2]) / step**2
        assert np.all(second >= -1e-8)

    @pytest.mark.parametrize("name", ["classical-chain", "qubit-unitary-mixture"])
    def test_phi_prime_matches_finite_difference(self, cgf_service, name):
        """The eigenvector formula agrees with a central difference of phi across a grid."""
        profile = cgf_service.profile(fixtures.BUILDERS[name]())
        h = 1e-5
        for theta in np.linspace(-2.0, 2.0, 9):
            central = (profile.phi(theta + h) - profile.phi(theta - h)) / (2 * h)
            assert profile.phi_prime(theta) == pytest.approx(central, abs=1e-6)


class TestInverse:
    """Test the inverse of phi'."""

    def test_coin_inverse(self, cgf_service, coin):
        """phi'^{-1}(0.75) = log 3."""
        assert cgf_service.profile(coin).phi_prime_inverse(0.75) == pytest.approx(math.log(3), abs=1e-9)

    def test_mean_maps_to_zero(self, cgf_service, chain):
        """phi'^{-1}(phi'(0)) = 0."""
        profile = cgf_service.profile(chain)
        assert profile.phi_prime_inverse(profile.phi_prime(0.0)) == 0.0

    @pytest.mark.parametrize("a", [0.2, 0.55, 1.4, 2.6])
    def test_round_trip(self, cgf_service, chain, a):
        """phi'(phi'^{-1}(a)) = a on both sides of the mean."""
        profile = cgf_service.profile(chain)
        assert profile.phi_prime(profile.phi_prime_inverse(a)) == pytest.approx(a, abs=1e-8)

    def test_degenerate(self, cgf_service, shift):
        """Affine phi cannot be inverted."""
        with pytest.raises(DegenerateCgfError):
            cgf_service.profile(shift).phi_prime_inverse(1.5)

    def test_unreachable(self, cgf_service, coin):
        """Levels outside [min x, max x] are unreachable."""
        with pytest.raises(UnreachableLevelError):
            cgf_service.profile(coin).phi_prime_inverse(1.2)

    @pytest.mark.parametrize("name, a", [
        ("classical-chain", 3.5),
        ("classical-chain", 3.0),
        ("classical-chain", -0.5),
        ("qubit-unitary-mixture", 1.0),
        ("qubit-unitary-mixture", -1.2),
    ])
    def test_unreachable_on_hidden_systems(self, cgf_service, name, a):
        """Levels at or beyond the extreme values are unreachable for d >= 2 as well."""
        with pytest.raises(UnreachableLevelError):
            cgf_service.profile(fixtures.BUILDERS[name]()).phi_prime_inverse(a)

    def test_level_lost_to_eigenvector_positivity(self, cgf_service, chain):
        """A level the bracket cannot reach before rho_theta degenerates is unreachable, not reducible."""
        with pytest.raises(UnreachableLevelError, match="loses positivity"):
            cgf_service.profile(chain).phi_prime_inverse(3.0 - 1e-12)


class TestDivergences:
    """Test divergences and the rate function."""

    def test_coin_rate_is_kl(self, cgf_service, coin):
        """I(0.75) = KL(0.75 || 0.5)."""
        rate = cgf_service.profile(coin).rate_function(0.75)
        assert rate == pytest.approx(0.75 * math.log(1.5) + 0.25 * math.log(0.5), abs=1e-9)
        assert rate == pytest.approx(0.130812, abs=1e-6)

    def test_rate_zero_at_mean(self, cgf_service, qubit):
        """I(phi'(0)) = 0."""
        assert cgf_service.profile(qubit).rate_function(0.4) == 0.0

    def test_renyi_monotone_in_s(self, cgf_service, chain):
        """D_{1+s}(theta || 0) is nondecreasing in s."""
        profile = cgf_service.profile(chain)
        values = [profile.renyi_bregman(s, 0.8, 0.0) for s in np.linspace(0.05, 3.0, 20)]
        assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize("name", ["iid-coin", "classical-chain", "qubit-unitary-mixture"])
    def test_renyi_limit(self, cgf_service, name):
        """D_{1.001} is within 1e-4 (1 + |D|) of D."""
        profile = cgf_service.profile(fixtures.BUILDERS[name]())
        kl = profile.bregman(0.1, 0.0)
        assert abs(profile.renyi_bregman(0.001, 0.1, 0.0) - kl) <= 1e-4 * (1 + abs(kl))

    def test_renyi_rejects_non_positive_s(self, cgf_service, coin):
        """s must be positive."""
        with pytest.raises(ValueError):
            cgf_service.profile(coin).renyi_bregman(0.0, 1.0, 0.0)

    @pytest.mark.parametrize("name, a", [("iid-coin", 0.7), ("classical-chain", 1.5), ("qubit-unitary-mixture", 0.1)])
    def test_three_forms_agree(self, cgf_service, name, a):
        """Rate function, D(theta_a || 0) and the infimum form coincide."""
        profile = cgf_service.profile(fixtures.BUILDERS[name]())
        rate = profile.rate_function(a)
        divergence = profile.bregman(profile.phi_prime_inverse(a), 0.0)
        assert divergence == pytest.approx(rate, abs=1e-9)
        assert profile.infimum_form(a) == pytest.approx(rate, abs=1e-5)


class TestCache:
    """Test the eigendata cache."""

    def test_repeated_theta_hits_cache(self, cgf_service, chain):
        """The same theta is computed once."""
        profile = cgf_service.profile(chain)
        with patch.object(profile.pf_service, "pf_eigendata", wraps=profile.pf_service.pf_eigendata) as spy:
            profile.phi(0.3)
            profile.phi(0.3)
            profile.deltas(0.3)
        assert spy.call_count == 1
        assert profile.cache_misses == 1

    def test_prefetch_with_threads(self, chain):
        """Parallel prefetch fills the cache with the same values as serial calls."""
        threaded = CgfProfile(chain, Settings(threads=4))
        serial = CgfProfile(chain, Settings())
        grid = np.linspace(-1.0, 1.0, 9)
        threaded.prefetch(grid)
        assert threaded.cache_misses == 9
        for theta in grid:
            assert threaded.phi(theta) == pytest.approx(serial.phi(theta), abs=1e-14)
        assert threaded.cache_misses == 9


class TestMinimizer:
    """Test the grid-plus-descent minimizer."""

    def test_finds_quadratic_minimum(self):
        """A separable quadratic is minimized to high accuracy."""
        x, y, value = minimize_on_grid(
            lambda s, u: (s - 0.3) ** 2 + 2 * (u + 1.1) ** 2,
            s_bounds=(-2.0, 2.0),
            u_bounds=(-3.0, 1.0),
            grid_size=10,
            descent_iterations=10,
            line_iterations=60,
        )
        assert x == pytest.approx(0.3, abs=1e-5)
        assert y == pytest.approx(-1.1, abs=1e-5)
        assert value == pytest.approx(0.0, abs=1e-9)

    def test_all_infinite(self):
        """An everywhere-infinite objective returns inf."""
        _, _, value = minimize_on_grid(lambda s, u: np.inf, (0.0, 1.0), (0.0, 1.0), 4, 3, 5)
        assert value == np.inf

    def test_evaluation_count_bounded(self):
        """Evaluations depend only on the iteration counts."""
        calls = []

        def objective(s, u):
            calls.append((s, u))
            return math.cos(3 * s) + u**2

        minimize_on_grid(objective, (0.0, 2.0), (-1.0, 1.0), grid_size=8, descent_iterations=5, line_iterations=20)
        assert len(calls) <= 8 * 8 + 5 * 2 * 25
