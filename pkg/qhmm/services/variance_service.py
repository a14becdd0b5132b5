"""
Variance Service

Projector map, quantum fundamental matrix and the exact asymptotic variance
phi''(0) of the observed sum.
"""

import logging
from typing import Optional

import numpy as np
from scipy import linalg

from qhmm.config import Settings
from qhmm.core.operators import DensityOperator, SuperOperator, identity_map, vec
from qhmm.models.instrument import Instrument
from qhmm.models.reports import FundamentalData, VarianceReport
from qhmm.services.cgf_service import CgfProfile
from qhmm.services.perron_frobenius_service import (
    NotIrreducibleError,
    PerronFrobeniusService,
)

logger = logging.getLogger(__name__)


class NotPrimitiveError(ValueError):
    """Raised when the total map is irreducible but not primitive."""
    pass


class ZeroVarianceError(ValueError):
    """Raised when the asymptotic variance vanishes."""
    pass


SLOW_MIXING_THRESHOLD = 1 - 1e-6


class VarianceService:
    """
    Service for the fundamental matrix and asymptotic variance.

    Features:
    - Lambda-tilde = (Tr .) rho_0 and Z = (iota - (Lambda - Lambda-tilde))^-1
    - Neumann and Cesaro verification paths for Z
    - phi''(0) = V[X] + 2 Tr C_X (Z - Lambda-tilde) C_X (rho_0)
    - Exact finite-n variance of the sum for any initial state
    """

    def __init__(self, settings: Settings, pf_service: Optional[PerronFrobeniusService] = None):
        self.settings = settings
        self.pf_service = pf_service or PerronFrobeniusService(settings)
        self.instruments = self.pf_service.instruments

    def fundamental_data(self, instr: Instrument, require_primitive: bool = True) -> FundamentalData:
        """
        Projector map and fundamental matrix of the total map.

        Args:
            instr: Valid instrument
            require_primitive: Reject irreducible maps with a non-trivial peripheral
                spectrum. Z still exists for those, since 1 is a simple eigenvalue.

        Returns:
            FundamentalData

        Raises:
            NotPrimitiveError: If primitivity is required and fails
            NotIrreducibleError: If the total map is reducible
        """
        classification = self.pf_service.classify_instrument(instr)
        if not classification.irreducible:
            raise NotIrreducibleError("Total map is not irreducible; no stationary state")
        if require_primitive and not classification.primitive:
            raise NotPrimitiveError(
                "Total map is irreducible but not primitive: Lambda^n(rho) oscillates "
                "(as for the cyclic shift) and Lambda-tilde = lim Lambda^n does not exist"
            )

        d = instr.dim
        total = self.instruments.total_map(instr)
        rho0 = self.pf_service.pf_eigendata(instr, 0.0).rho
        projector = np.outer(vec(rho0.matrix), vec(np.eye(d)))
        difference = total.matrix - projector
        z = linalg.inv(np.eye(d * d) - difference)

        moduli = np.abs(linalg.eigvals(difference))
        second = float(np.max(moduli)) if moduli.size else 0.0
        if second > SLOW_MIXING_THRESHOLD:
            logger.warning(
                f"Second eigenvalue modulus {second:.8f} is close to 1; "
                f"fundamental matrix is ill-conditioned"
            )

        return FundamentalData(
            rho0=rho0,
            lambda_tilde=SuperOperator.from_matrix(projector, d),
            z=SuperOperator.from_matrix(z, d),
            second_eigenvalue_modulus=second,
        )

    def neumann_fundamental(
        self, instr: Instrument, data: FundamentalData, tol: float = 1e-8, max_terms: int = 100000
    ) -> SuperOperator:
        """
        Z as the truncated series sum_k (Lambda - Lambda-tilde)^k.

        Stops at the first N with ||(Lambda - Lambda-tilde)^N|| < tol.
        """
        d = instr.dim
        difference = self.instruments.total_map(instr).matrix - data.lambda_tilde.matrix
        term = np.eye(d * d, dtype=complex)
        total = np.zeros_like(term)
        for count in range(max_terms):
            total += term
            term = term @ difference
            if np.linalg.norm(term, 2) < tol:
                logger.debug(f"Neumann series truncated after {count + 1} terms")
                break
        return SuperOperator.from_matrix(total, d)

    def cesaro_fundamental(self, instr: Instrument, n: int, data: Optional[FundamentalData] = None) -> SuperOperator:
        """iota + (1/n) sum_{k=1}^{n} (n - k + 1)(Lambda^k - Lambda-tilde)."""
        data = data or self.fundamental_data(instr)
        d = instr.dim
        total_matrix = self.instruments.total_map(instr).matrix
        projector = data.lambda_tilde.matrix
        power = np.eye(d * d, dtype=complex)
        accumulated = np.zeros_like(power)
        for k in range(1, n + 1):
            power = power @ total_matrix
            accumulated += (n - k + 1) * (power - projector)
        return SuperOperator.from_matrix(identity_map(d).matrix + accumulated / n, d)

    def _stationary_moments(self, instr: Instrument, rho: DensityOperator) -> tuple[float, float]:
        probabilities = self.instruments.outcome_probabilities(instr, rho)
        values = instr.values
        mean = float(np.dot(values, probabilities))
        return mean, float(np.dot(values**2, probabilities)) - mean**2

    def variance_parts(self, instr: Instrument, require_primitive: bool = True) -> tuple[float, float, FundamentalData]:
        """(V_{rho_0}[X], 2 Tr C_X (Z - Lambda-tilde) C_X (rho_0), fundamental data)."""
        data = self.fundamental_data(instr, require_primitive=require_primitive)
        _, stationary = self._stationary_moments(instr, data.rho0)
        weighted = self.instruments.weighted_map(instr).matrix
        d = instr.dim
        chain = weighted @ (data.z.matrix - data.lambda_tilde.matrix) @ weighted @ vec(data.rho0.matrix)
        correction = 2 * float(np.dot(vec(np.eye(d)), chain).real)
        return stationary, correction, data

    def asymptotic_variance(self, instr: Instrument, require_primitive: bool = True) -> float:
        """
        phi''(0) = V_{rho_0}[X] + 2 Tr C_X (Z - Lambda-tilde) C_X (rho_0).

        Raises:
            NotPrimitiveError: If primitivity is required and fails
            NotIrreducibleError: If the total map is reducible
        """
        stationary, correction, _ = self.variance_parts(instr, require_primitive)
        return stationary + correction

    def finite_n_variance(self, instr: Instrument, rho: DensityOperator, n: int) -> float:
        """
        Exact variance of the sum of n outcome values from initial state rho.

        Propagates the zeroth, first and second moment operators
        F0 <- Lambda F0, F1 <- Lambda F1 + C_X F0, F2 <- Lambda F2 + 2 C_X F1 + C_{X^2} F0,
        never enumerating outcome sequences.
        """
        if n < 1:
            raise ValueError("n must be at least 1")
        total = self.instruments.total_map(instr).matrix
        weighted = self.instruments.weighted_map(instr).matrix
        squared = self.instruments.squared_weighted_map(instr).matrix
        f0 = vec(rho.matrix).astype(complex)
        f1 = np.zeros_like(f0)
        f2 = np.zeros_like(f0)
        for _ in range(n):
            f0, f1, f2 = (
                total @ f0,
                total @ f1 + weighted @ f0,
                total @ f2 + 2 * (weighted @ f1) + squared @ f0,
            )
        trace_row = vec(np.eye(instr.dim))
        first = float(np.dot(trace_row, f1).real)
        second = float(np.dot(trace_row, f2).real)
        return second - first**2

    def variance_report(self, instr: Instrument, n: Optional[int] = None) -> VarianceReport:
        """
        Stationary variance, correction, phi''(0), finite-difference check and
        (1/n) finite_n_variance from rho_0 when n is given.
        """
        stationary, correction, data = self.variance_parts(instr)
        profile = CgfProfile(instr, self.settings, state=data.rho0, pf_service=self.pf_service)
        scaled = None
        if n is not None:
            scaled = self.finite_n_variance(instr, data.rho0, n) / n
        report = VarianceReport(
            stationary_variance=stationary,
            correction=correction,
            asymptotic_variance=stationary + correction,
            finite_difference=profile.phi_double_prime(0.0),
            second_eigenvalue_modulus=data.second_eigenvalue_modulus,
            n=n,
            finite_n_scaled=scaled,
        )
        logger.info(f"Asymptotic variance {report.asymptotic_variance:.10g}")
        return report

