"""
Instrument Service

Validates instruments and builds the maps derived from them: the total map,
tilted and weighted maps, and the conversion to and from the finitely
correlated state presentation.
"""

import logging
from typing import Optional, Sequence

import numpy as np
from numpy import ndarray

from qhmm.config import Settings
from qhmm.core.operators import (
    DensityOperator,
    HermitianOperator,
    SuperOperator,
    choi_matrix,
    kraus_from_choi,
)
from qhmm.models.instrument import (
    FcsModel,
    FcsModelError,
    Instrument,
    InvariantCheck,
    Outcome,
    ValidationReport,
)

logger = logging.getLogger(__name__)


class InvalidInstrumentError(ValueError):
    """Raised when an operation needs a valid instrument and gets an invalid one."""
    pass


class TiltOverflowError(OverflowError):
    """Raised when |theta * x| exceeds the overflow guard."""
    pass


class InstrumentService:
    """
    Service for instrument validation and map construction.

    Features:
    - Structured validation reports
    - Total, tilted, weighted and derivative maps
    - Classical chain embedding
    - Conversion to and from finitely correlated state generators
    """

    def __init__(self, settings: Settings):
        self.settings = settings

    def validate(self, instr: Instrument) -> ValidationReport:
        """
        Check every instrument invariant and report residuals.

        Never raises for invalid content; failures are listed in the report.

        Args:
            instr: Instrument to check

        Returns:
            ValidationReport with one entry per invariant
        """
        checks: list[InvariantCheck] = []

        has_outcomes = len(instr.outcomes) > 0
        checks.append(
            InvariantCheck(
                name="has_outcomes",
                passed=has_outcomes,
                message=None if has_outcomes else "no outcomes",
            )
        )

        non_finite = [o.label for o in instr.outcomes if not np.isfinite(o.value)]
        checks.append(
            InvariantCheck(
                name="finite_values",
                passed=not non_finite,
                message=f"non-finite values for outcomes {non_finite}" if non_finite else None,
            )
        )

        bad_kraus = [
            o.label for o in instr.outcomes if any(not np.all(np.isfinite(k)) for k in o.kraus)
        ]
        checks.append(
            InvariantCheck(
                name="finite_kraus",
                passed=not bad_kraus,
                message=f"non-finite Kraus entries for outcomes {bad_kraus}" if bad_kraus else None,
            )
        )

        if has_outcomes and not bad_kraus:
            completeness = sum(
                (k.conj().T @ k for o in instr.outcomes for k in o.kraus),
                np.zeros((instr.dim, instr.dim), dtype=complex),
            )
            residual = float(np.linalg.norm(completeness - np.eye(instr.dim)))
            tp = residual <= self.settings.kraus_tol
            checks.append(
                InvariantCheck(
                    name="trace_preserving",
                    passed=tp,
                    residual=residual,
                    message=None if tp else "sum of K^dagger K differs from identity",
                )
            )
        else:
            checks.append(
                InvariantCheck(
                    name="trace_preserving",
                    passed=False,
                    message="not evaluated",
                )
            )

        if instr.initial_state is not None:
            try:
                DensityOperator(matrix=instr.initial_state)
                checks.append(InvariantCheck(name="initial_state", passed=True))
            except ValueError as e:
                checks.append(InvariantCheck(name="initial_state", passed=False, message=str(e)))

        report = ValidationReport(
            passed=all(c.passed for c in checks),
            dim=instr.dim,
            outcome_count=len(instr.outcomes),
            checks=checks,
        )
        if not report.passed:
            logger.info(f"Instrument validation failed: {[c.name for c in report.failures]}")
        return report

    def require_valid(self, instr: Instrument) -> None:
        """
        Raise if the instrument is invalid.

        Raises:
            InvalidInstrumentError: With the failing checks in the message
        """
        report = self.validate(instr)
        if not report.passed:
            details = "; ".join(
                f"{c.name}: {c.message or ''} (residual {c.residual})" for c in report.failures
            )
            raise InvalidInstrumentError(f"Invalid instrument: {details}")

    def outcome_maps(self, instr: Instrument) -> list[SuperOperator]:
        """C_omega for every outcome, in order."""
        return [o.superoperator(instr.dim) for o in instr.outcomes]

    def total_map(self, instr: Instrument) -> SuperOperator:
        """Lambda = sum_omega C_omega."""
        kraus = [k for o in instr.outcomes for k in o.kraus]
        return SuperOperator.from_kraus(kraus, dim_in=instr.dim, dim_out=instr.dim)

    def _check_tilt(self, instr: Instrument, theta: float) -> None:
        if len(instr.outcomes) == 0:
            return
        worst = float(np.max(np.abs(theta * instr.values)))
        if worst > self.settings.overflow_guard:
            raise TiltOverflowError(
                f"|theta * x| = {worst:.3g} exceeds the overflow guard "
                f"{self.settings.overflow_guard}"
            )

    def reweighted_map(self, instr: Instrument, weights: Sequence[float]) -> SuperOperator:
        """sum_omega a_omega C_omega for nonnegative weights, Kraus-backed."""
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (len(instr.outcomes),) or np.any(weights < 0):
            raise ValueError("Weights must be nonnegative, one per outcome")
        kraus = [
            np.sqrt(w) * k for o, w in zip(instr.outcomes, weights) for k in o.kraus
        ]
        return SuperOperator.from_kraus(kraus, dim_in=instr.dim, dim_out=instr.dim)

    def tilted_map(self, instr: Instrument, theta: float) -> SuperOperator:
        """
        Lambda_theta = sum_omega e^{theta x_omega} C_omega.

        Each Kraus operator of C_omega is scaled by e^{theta x_omega / 2}.

        Raises:
            TiltOverflowError: If |theta * x_omega| exceeds the overflow guard
        """
        if theta == 0:
            return self.total_map(instr)
        self._check_tilt(instr, theta)
        kraus = [
            np.exp(theta * o.value / 2) * k for o in instr.outcomes for k in o.kraus
        ]
        return SuperOperator.from_kraus(kraus, dim_in=instr.dim, dim_out=instr.dim)

    def _linear_combination(self, instr: Instrument, weights: ndarray) -> SuperOperator:
        d = instr.dim
        matrix = np.zeros((d * d, d * d), dtype=complex)
        for outcome, weight in zip(instr.outcomes, weights):
            if weight != 0:
                matrix += weight * outcome.superoperator(d).matrix
        return SuperOperator.from_matrix(matrix, d)

    def weighted_map(self, instr: Instrument) -> SuperOperator:
        """C_X = sum_omega x_omega C_omega (not trace-preserving in general)."""
        return self._linear_combination(instr, instr.values)

    def squared_weighted_map(self, instr: Instrument) -> SuperOperator:
        """C_{X^2} = sum_omega x_omega^2 C_omega."""
        return self._linear_combination(instr, instr.values**2)

    def derivative_map(self, instr: Instrument, theta: float) -> SuperOperator:
        """d/dtheta Lambda_theta = sum_omega x_omega e^{theta x_omega} C_omega."""
        self._check_tilt(instr, theta)
        values = instr.values
        return self._linear_combination(instr, values * np.exp(theta * values))

    def outcome_probabilities(self, instr: Instrument, rho: DensityOperator) -> ndarray:
        """(Tr C_omega(rho))_omega."""
        probabilities = []
        for outcome in instr.outcomes:
            effect = sum(
                (k.conj().T @ k for k in outcome.kraus),
                np.zeros((instr.dim, instr.dim), dtype=complex),
            )
            probabilities.append(float(np.trace(effect @ rho.matrix).real))
        return np.array(probabilities)

    @staticmethod
    def embed_stochastic_matrix(
        transition: ndarray,
        values: ndarray,
        initial_state: Optional[ndarray] = None,
    ) -> Instrument:
        """
        Classical Markov chain as a diagonal-preserving instrument.

        Args:
            transition: Column-stochastic matrix, T[j, i] = Pr(i -> j)
            values: values[i, j] is the outcome value of the transition i -> j
            initial_state: Optional initial state (default I/d)

        Returns:
            Instrument with one outcome "i->j" and Kraus sqrt(T[j, i]) |j><i| per
            transition of positive probability
        """
        transition = np.asarray(transition, dtype=float)
        values = np.asarray(values, dtype=float)
        d = transition.shape[0]
        if transition.shape != (d, d) or values.shape != (d, d):
            raise ValueError("Transition and value matrices must be square and of equal size")
        if np.any(transition < 0) or not np.allclose(transition.sum(axis=0), 1.0, atol=1e-12):
            raise ValueError("Transition matrix must be column-stochastic")
        outcomes = []
        for i in range(d):
            for j in range(d):
                if transition[j, i] > 0:
                    kraus = np.zeros((d, d), dtype=complex)
                    kraus[j, i] = np.sqrt(transition[j, i])
                    outcomes.append(Outcome(label=f"{i}->{j}", value=values[i, j], kraus=[kraus]))
        return Instrument(dim=d, outcomes=outcomes, initial_state=initial_state)

    def to_fcs(self, instr: Instrument) -> FcsModel:
        """
        Gamma(rho) = sum_omega |omega><omega| (x) C_omega(rho), A = sum_omega x_omega |omega><omega|.

        Labels stay distinct even when values coincide.
        """
        self.require_valid(instr)
        d, m = instr.dim, len(instr.outcomes)
        kraus = []
        for index, outcome in enumerate(instr.outcomes):
            register = np.zeros((m, 1))
            register[index, 0] = 1.0
            kraus.extend(np.kron(register, k) for k in outcome.kraus)
        gamma = SuperOperator.from_kraus(kraus, dim_in=d, dim_out=m * d)
        return FcsModel(
            hidden_dim=d,
            output_dim=m,
            gamma=gamma,
            observable=HermitianOperator(matrix=np.diag(instr.values)),
            initial_state=instr.initial_state,
        )

    def gamma_kraus(self, model: FcsModel) -> list[ndarray]:
        """Kraus operators of Gamma, taken from the model or from its Choi matrix."""
        if model.gamma.kraus is not None:
            return list(model.gamma.kraus)
        return kraus_from_choi(choi_matrix(model.gamma), model.gamma.dim_in, model.gamma.dim_out)

    def from_fcs(self, model: FcsModel) -> Instrument:
        """
        C_omega(rho) = Tr_out (E_omega (x) I) Gamma(rho) for the spectral projections E_omega of A.

        Eigenvalues of A closer than kraus_tol are merged into one outcome.

        Raises:
            FcsModelError: If Gamma has no Kraus decomposition
        """
        eigenvalues, eigenvectors = np.linalg.eigh(model.observable.matrix)
        groups: list[list[int]] = []
        for index, value in enumerate(eigenvalues):
            if groups and abs(value - eigenvalues[groups[-1][0]]) <= self.settings.kraus_tol:
                groups[-1].append(index)
            else:
                groups.append([index])

        gamma_kraus = self.gamma_kraus(model)
        if not gamma_kraus:
            raise FcsModelError("Gamma has no Kraus decomposition")

        d_h = model.hidden_dim
        outcomes = []
        used_labels: set[str] = set()
        for group_index, group in enumerate(groups):
            value = float(np.mean(eigenvalues[group]))
            kraus = []
            for j in group:
                bra = np.kron(eigenvectors[:, j].conj().reshape(1, -1), np.eye(d_h))
                kraus.extend(bra @ g for g in gamma_kraus)
            label = f"x={value:.12g}"
            if label in used_labels:
                label = f"{label}#{group_index}"
            used_labels.add(label)
            outcomes.append(Outcome(label=label, value=value, kraus=kraus))

        logger.debug(f"from_fcs produced {len(outcomes)} outcomes from {len(eigenvalues)} eigenvalues")
        return Instrument(dim=d_h, outcomes=outcomes, initial_state=model.initial_state)
