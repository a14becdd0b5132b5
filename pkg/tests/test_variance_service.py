"""
Test suite for Variance Service

Tests cover:
- Asymptotic variance against finite differences of phi and the exact finite-n variance
- Agreement with the classical fundamental-matrix formula on the embedded chain
- Neumann and Cesaro routes to the fundamental matrix
- Rejection of non-primitive and reducible maps
- Variance reports
"""

import numpy as np
import pytest

from qhmm.services.perron_frobenius_service import NotIrreducibleError
from qhmm.services.variance_service import NotPrimitiveError

PRIMITIVE = ["coin", "chain", "qubit"]


def classical_variance(transition: np.ndarray, values: np.ndarray) -> float:
    """Asymptotic variance of sum x(i -> j) for a column-stochastic chain."""
    size = transition.shape[0]
    eigenvalues, eigenvectors = np.linalg.eig(transition)
    pi = np.real(eigenvectors[:, np.argmin(np.abs(eigenvalues - 1))])
    pi = pi / pi.sum()
    ones = np.ones(size)
    weighted = transition * values
    squared = transition * values**2
    projector = np.outer(pi, ones)
    fundamental = np.linalg.inv(np.eye(size) - transition + projector)
    mean = ones @ weighted @ pi
    return float(
        ones @ squared @ pi - mean**2 + 2 * ones @ weighted @ (fundamental - projector) @ weighted @ pi
    )


class TestAsymptoticVariance:
    """Test phi''(0) from the fundamental matrix."""

    @pytest.mark.parametrize("fixture_name", PRIMITIVE)
    def test_matches_finite_difference(self, request, cgf_service, variance_service, fixture_name):
        """Fundamental-matrix formula agrees with a finite difference of phi."""
        instr = request.getfixturevalue(fixture_name)
        exact = variance_service.asymptotic_variance(instr)
        assert cgf_service.profile(instr).phi_double_prime(0.0) == pytest.approx(exact, rel=1e-5)

    @pytest.mark.parametrize("fixture_name", PRIMITIVE)
    def test_matches_finite_n_variance(self, request, variance_service, fixture_name):
        """(1/n) Var[sum] from rho_0 approaches phi''(0) at n = 10^4."""
        instr = request.getfixturevalue(fixture_name)
        rho0 = variance_service.fundamental_data(instr).rho0
        n = 10_000
        scaled = variance_service.finite_n_variance(instr, rho0, n) / n
        assert scaled == pytest.approx(variance_service.asymptotic_variance(instr), rel=1e-3)

    def test_closed_forms(self, variance_service, coin, qubit):
        """i.i.d. outcomes: the correction vanishes and phi''(0) is the one-step variance."""
        assert variance_service.asymptotic_variance(coin) == pytest.approx(0.25)
        stationary, correction, _ = variance_service.variance_parts(qubit)
        assert stationary == pytest.approx(0.84)
        assert correction == pytest.approx(0.0, abs=1e-12)

    def test_chain_matches_classical_formula(self, variance_service, chain):
        """The embedded chain reproduces the classical fundamental-matrix variance."""
        transition = np.array([[0.9, 0.2], [0.1, 0.8]])
        values = np.array([[0.0, 1.0], [2.0, 3.0]])
        expected = classical_variance(transition, values)
        assert variance_service.asymptotic_variance(chain) == pytest.approx(expected, abs=1e-8)

    def test_finite_n_variance_small_n(self, variance_service, coin):
        """Var of n fair coin flips is n / 4 for any n."""
        rho = coin.state()
        for n in (1, 2, 7):
            assert variance_service.finite_n_variance(coin, rho, n) == pytest.approx(n / 4)

    def test_finite_n_variance_rejects_zero(self, variance_service, coin):
        """n must be at least 1."""
        with pytest.raises(ValueError):
            variance_service.finite_n_variance(coin, coin.state(), 0)


class TestFundamentalMatrix:
    """Test the fundamental matrix and its verification routes."""

    def test_stationary_state_and_gap(self, variance_service, chain):
        """rho_0 = diag(2/3, 1/3) and the second eigenvalue modulus is 0.7."""
        data = variance_service.fundamental_data(chain)
        assert np.allclose(data.rho0.matrix, np.diag([2 / 3, 1 / 3]))
        assert data.second_eigenvalue_modulus == pytest.approx(0.7)

    def test_neumann_agrees(self, variance_service, chain):
        """The truncated Neumann series reproduces Z."""
        data = variance_service.fundamental_data(chain)
        neumann = variance_service.neumann_fundamental(chain, data, tol=1e-12)
        assert np.allclose(neumann.matrix, data.z.matrix, atol=1e-10)

    def test_cesaro_agrees(self, variance_service, chain):
        """Cesaro means of the powers approach Z."""
        data = variance_service.fundamental_data(chain)
        cesaro = variance_service.cesaro_fundamental(chain, 2000, data)
        assert np.allclose(cesaro.matrix, data.z.matrix, atol=1e-2)

    def test_cesaro_on_periodic_map(self, variance_service, shift):
        """Z exists for the shift and the Cesaro route still reaches it."""
        data = variance_service.fundamental_data(shift, require_primitive=False)
        cesaro = variance_service.cesaro_fundamental(shift, 3000, data)
        assert np.allclose(cesaro.matrix, data.z.matrix, atol=1e-2)


class TestRejection:
    """Test non-primitive and reducible inputs."""

    def test_shift_not_primitive(self, variance_service, shift):
        """Primitivity is required by default."""
        with pytest.raises(NotPrimitiveError):
            variance_service.asymptotic_variance(shift)

    def test_shift_variance_zero_when_allowed(self, variance_service, shift):
        """Without the primitivity requirement the shift has zero variance."""
        assert variance_service.asymptotic_variance(shift, require_primitive=False) == pytest.approx(0.0, abs=1e-10)

    def test_block_not_irreducible(self, variance_service, block):
        """Reducible maps have no unique stationary state."""
        with pytest.raises(NotIrreducibleError):
            variance_service.fundamental_data(block, require_primitive=False)


class TestVarianceReport:
    """Test variance reports."""

    def test_report_fields(self, variance_service, chain):
        """Report parts add up and the cross-checks agree."""
        report = variance_service.variance_report(chain, n=5000)
        assert report.asymptotic_variance == pytest.approx(report.stationary_variance + report.correction)
        assert report.finite_difference == pytest.approx(report.asymptotic_variance, rel=1e-5)
        assert report.finite_n_scaled == pytest.approx(report.asymptotic_variance, rel=2e-3)
        assert report.n == 5000

    def test_report_without_n(self, variance_service, coin):
        """Finite-n fields are empty when n is omitted."""
        report = variance_service.variance_report(coin)
        assert report.n is None
        assert report.finite_n_scaled is None
