"""
Perron-Frobenius Service

Eigendata of tilted maps with the trace-1 / min-eigenvalue-1 normalization and
irreducibility / primitivity classification of completely positive maps.
"""

import logging
from typing import Optional, Sequence

import numpy as np
from numpy import ndarray
from scipy import linalg

from qhmm.config import Settings
from qhmm.core.operators import (
    DensityOperator,
    HermitianOperator,
    SpectralError,
    SuperOperator,
    eigenvalues,
    hermitian_part,
    is_completely_positive,
    is_trace_preserving,
    random_pure_state,
    tensor,
    unvec,
    vec,
)
from qhmm.models.instrument import Instrument
from qhmm.models.reports import (
    Classification,
    PerronFrobeniusData,
    PositivityCrosscheck,
    PositivityVerdict,
    PrimitivityMethod,
    SpectralDiagnostics,
)
from qhmm.services.instrument_service import InstrumentService

logger = logging.getLogger(__name__)


class NotIrreducibleError(ValueError):
    """Raised when Perron-Frobenius eigenvectors are not strictly positive."""
    pass


class DegeneratePeripheralError(NotIrreducibleError):
    """Raised when the spectral radius has geometric multiplicity greater than one."""
    pass


class NotCompletelyPositiveError(ValueError):
    """Raised when a map passed to classify is not completely positive."""
    pass


class PerronFrobeniusService:
    """
    Service for Perron-Frobenius theory of CP maps.

    Features:
    - Normalized eigendata (lambda_theta, rho_theta, A_theta) of tilted maps
    - Irreducibility and primitivity decisions with diagnostics
    - Randomized positivity-improving cross-checks
    - Cesaro and plain power orbits
    """

    def __init__(self, settings: Settings, instruments: Optional[InstrumentService] = None):
        self.settings = settings
        self.instruments = instruments or InstrumentService(settings)

    def _null_space(self, matrix: ndarray) -> ndarray:
        return linalg.null_space(matrix, rcond=self.settings.eig_tol)

    def _normalized_eigvec(self, vector: ndarray, dim: int) -> Optional[ndarray]:
        """Fix the phase of an eigenvector by its trace; None if the trace vanishes."""
        matrix = unvec(vector, dim)
        trace = np.trace(matrix)
        if abs(trace) <= self.settings.zero_margin * max(1.0, float(np.max(np.abs(matrix)))):
            return None
        return hermitian_part(matrix / trace)

    @staticmethod
    def _margin(matrix: Optional[ndarray]) -> float:
        """min eigenvalue / max eigenvalue; -1 when no positive representative exists."""
        if matrix is None:
            return -1.0
        values = linalg.eigvalsh(matrix)
        if values[-1] <= 0:
            return -1.0
        return float(values[0] / values[-1])

    def _verdict(self, *margins: float) -> PositivityVerdict:
        worst = min(margins)
        if worst > self.settings.positivity_margin:
            return PositivityVerdict.POSITIVE
        if worst <= self.settings.zero_margin:
            return PositivityVerdict.NOT_POSITIVE
        return PositivityVerdict.INDETERMINATE

    def peripheral_spectrum(self, superop: SuperOperator) -> list[complex]:
        """All eigenvalues with modulus within eig_tol * r of the spectral radius r."""
        values = eigenvalues(superop)
        radius = float(np.max(np.abs(values)))
        band = self.settings.eig_tol * max(radius, 1e-300)
        peripheral = values[np.abs(np.abs(values) - radius) <= band]
        return sorted((complex(v) for v in peripheral), key=lambda z: np.angle(z))

    def _spectral_test(self, superop: SuperOperator) -> SpectralDiagnostics:
        """Eigenvector positivity and multiplicity at the spectral radius."""
        values = eigenvalues(superop)
        radius = float(np.max(np.abs(values)))
        band = self.settings.eig_tol * max(radius, 1e-300)
        peripheral = values[np.abs(np.abs(values) - radius) <= band]
        peripheral_pairs = [(float(v.real), float(v.imag)) for v in peripheral]

        if radius == 0:
            return SpectralDiagnostics(
                spectral_radius=0.0,
                peripheral_spectrum=peripheral_pairs,
                geometric_multiplicity=0,
                right_margin=-1.0,
                left_margin=-1.0,
                verdict=PositivityVerdict.NOT_POSITIVE,
            )

        identity = np.eye(superop.matrix.shape[0])
        right = self._null_space(superop.matrix - radius * identity)
        left = self._null_space(superop.matrix.conj().T - radius * identity)
        multiplicity = max(right.shape[1], left.shape[1])
        if right.shape[1] == 0 or left.shape[1] == 0:
            raise SpectralError(
                f"No eigenvector found at spectral radius {radius:.6g}; "
                f"eigenvalue accuracy is below eig_tol"
            )

        if multiplicity > 1:
            right_margin = left_margin = 0.0
            verdict = PositivityVerdict.NOT_POSITIVE
        else:
            right_margin = self._margin(self._normalized_eigvec(right[:, 0], superop.dim_out))
            left_margin = self._margin(self._normalized_eigvec(left[:, 0], superop.dim_in))
            verdict = self._verdict(right_margin, left_margin)

        return SpectralDiagnostics(
            spectral_radius=radius,
            peripheral_spectrum=peripheral_pairs,
            geometric_multiplicity=multiplicity,
            right_margin=right_margin,
            left_margin=left_margin,
            verdict=verdict,
        )

    def classify(self, superop: SuperOperator) -> Classification:
        """
        Decide irreducibility and primitivity of a CP map.

        Irreducible iff the eigenvectors of M and M^dagger at r(M) are strictly
        positive definite and r(M) is geometrically simple. Primitive iff the same
        holds for M (x) M, or, above primitivity_tensor_max_dim, iff r(M) is the only
        peripheral eigenvalue of an irreducible M.

        Args:
            superop: Completely positive endomorphism

        Returns:
            Classification with verdicts and diagnostics

        Raises:
            NotCompletelyPositiveError: If the Choi matrix is not PSD
            SpectralError: On eigensolver failure
        """
        if not is_completely_positive(superop):
            raise NotCompletelyPositiveError("classify needs a completely positive map")
        dim = superop.dim

        diagnostics = self._spectral_test(superop)
        irreducible_verdict = diagnostics.verdict
        irreducible = irreducible_verdict == PositivityVerdict.POSITIVE

        tensor_diagnostics = None
        if dim <= self.settings.primitivity_tensor_max_dim:
            method = PrimitivityMethod.TENSOR_SQUARE
            if irreducible:
                tensor_diagnostics = self._spectral_test(tensor(superop, superop))
                primitive_verdict = tensor_diagnostics.verdict
            else:
                primitive_verdict = PositivityVerdict.NOT_POSITIVE
        else:
            method = PrimitivityMethod.PERIPHERAL_SPECTRUM
            if irreducible and len(diagnostics.peripheral_spectrum) == 1:
                primitive_verdict = PositivityVerdict.POSITIVE
            else:
                primitive_verdict = PositivityVerdict.NOT_POSITIVE
        primitive = irreducible and primitive_verdict == PositivityVerdict.POSITIVE

        for name, verdict in (("irreducibility", irreducible_verdict), ("primitivity", primitive_verdict)):
            if verdict == PositivityVerdict.INDETERMINATE:
                logger.warning(
                    f"Indeterminate {name}: positivity margins "
                    f"({diagnostics.right_margin:.3e}, {diagnostics.left_margin:.3e}) "
                    f"lie between zero_margin and positivity_margin"
                )

        trace_preserving = is_trace_preserving(superop)
        fixed_space_dim = None
        fixed_state_rank = None
        if trace_preserving:
            identity = np.eye(dim * dim)
            fixed = self._null_space(superop.matrix - identity)
            fixed_space_dim = int(fixed.shape[1])
            if fixed_space_dim == 1:
                state = self._normalized_eigvec(fixed[:, 0], dim)
                if state is not None:
                    values = linalg.eigvalsh(state)
                    fixed_state_rank = int(np.sum(values > self.settings.psd_tol * values[-1]))

        classification = Classification(
            irreducible=irreducible,
            primitive=primitive,
            irreducible_verdict=irreducible_verdict,
            primitive_verdict=primitive_verdict,
            primitivity_method=method,
            map_diagnostics=diagnostics,
            tensor_diagnostics=tensor_diagnostics,
            trace_preserving=trace_preserving,
            fixed_space_dim=fixed_space_dim,
            fixed_state_rank=fixed_state_rank,
        )
        logger.info(
            f"Classified map of dim {dim}: irreducible={irreducible}, primitive={primitive} "
            f"(method {method.value})"
        )
        return classification

    def classify_instrument(self, instr: Instrument) -> Classification:
        """Classify the total map of a valid instrument."""
        self.instruments.require_valid(instr)
        return self.classify(self.instruments.total_map(instr))

    def pf_eigendata(self, instr: Instrument, theta: float) -> PerronFrobeniusData:
        """
        Perron-Frobenius eigendata of Lambda_theta.

        rho_theta has trace 1 and A_theta has minimum eigenvalue 1. At theta = 0 the
        map is trace-preserving, so lambda = 1 and A = I are set exactly.

        Args:
            instr: Valid instrument with irreducible total map
            theta: Tilt parameter

        Returns:
            PerronFrobeniusData

        Raises:
            DegeneratePeripheralError: If r(Lambda_theta) is not geometrically simple
            NotIrreducibleError: If an eigenvector is not strictly positive definite
            TiltOverflowError: If the tilt exceeds the overflow guard
        """
        superop = self.instruments.tilted_map(instr, theta)
        dim = instr.dim
        values = eigenvalues(superop)
        radius = float(np.max(np.abs(values)))
        if radius <= 0:
            raise NotIrreducibleError(f"Tilted map at theta={theta} is nilpotent")

        identity = np.eye(dim * dim)
        right = self._null_space(superop.matrix - radius * identity)
        left = self._null_space(superop.matrix.conj().T - radius * identity)
        if right.shape[1] == 0 or left.shape[1] == 0:
            raise SpectralError(f"No eigenvector at spectral radius for theta={theta}")
        if right.shape[1] > 1 or left.shape[1] > 1:
            raise DegeneratePeripheralError(
                f"Spectral radius of the tilted map at theta={theta} has geometric "
                f"multiplicity {max(right.shape[1], left.shape[1])}"
            )

        rho = self._normalized_eigvec(right[:, 0], dim)
        a_op = self._normalized_eigvec(left[:, 0], dim)
        for name, matrix in (("rho", rho), ("A", a_op)):
            margin = self._margin(matrix)
            if margin <= self.settings.positivity_margin:
                raise NotIrreducibleError(
                    f"Eigenvector {name} at theta={theta} is not strictly positive "
                    f"(margin {margin:.3e})"
                )

        if theta == 0:
            a_op = np.eye(dim, dtype=complex)
            lam = 1.0
        else:
            a_op = a_op / linalg.eigvalsh(a_op)[0]
            image = unvec(superop.matrix @ vec(rho), dim)
            lam = float(np.sum(a_op * image.T).real / np.sum(a_op * rho.T).real)

        a_values = linalg.eigvalsh(a_op)
        others = np.delete(values, int(np.argmin(np.abs(values - radius))))
        second = float(np.max(np.abs(others))) if others.size else 0.0
        gap = 1.0 - second / radius
        peripheral_count = int(np.sum(np.abs(np.abs(values) - radius) <= self.settings.eig_tol * radius))
        if peripheral_count == 1 and gap < 1e-6:
            logger.warning(f"Small spectral gap {gap:.3e} at theta={theta}; eigendata may be ill-conditioned")
        logger.debug(f"pf_eigendata theta={theta}: lambda={lam!r}, gap={gap:.3e}")

        return PerronFrobeniusData(
            theta=theta,
            lam=lam,
            rho=DensityOperator(matrix=rho / np.trace(rho).real),
            a_op=HermitianOperator(matrix=a_op),
            a_norm=float(a_values[-1]),
            spectral_gap=gap,
        )

    def crosscheck_positivity_improving(
        self,
        superop: SuperOperator,
        trials: int,
        seed: int = 0,
        tensor_square: bool = False,
        states: Optional[Sequence[ndarray]] = None,
    ) -> PositivityCrosscheck:
        """
        Apply (iota + M)^(D^2 - 1) to random pure states and report the smallest output eigenvalue.

        A non-positive output refutes irreducibility (primitivity with tensor_square);
        strictly positive outputs only corroborate the classify verdict.

        Args:
            superop: CP endomorphism M
            trials: Number of Haar-random pure input states
            seed: RNG seed
            tensor_square: Use M (x) M instead of M
            states: Explicit input states, used instead of random ones

        Returns:
            PositivityCrosscheck report
        """
        target = tensor(superop, superop) if tensor_square else superop
        dim = target.dim
        power = dim * dim - 1

        if states is None:
            rng = np.random.default_rng(seed)
            states = [random_pure_state(rng, dim) for _ in range(trials)]
        columns = np.stack([vec(np.asarray(s, dtype=complex)) for s in states], axis=1)

        step = np.eye(dim * dim) + target.matrix
        trace_row = vec(np.eye(dim)).conj()
        for _ in range(power):
            columns = step @ columns
            columns = columns / (trace_row @ columns).real

        min_eigenvalue = np.inf
        min_relative = np.inf
        for column in columns.T:
            values = linalg.eigvalsh(hermitian_part(unvec(column, dim)))
            min_eigenvalue = min(min_eigenvalue, float(values[0]))
            min_relative = min(min_relative, float(values[0] / values[-1]))

        refuted = min_relative <= self.settings.zero_margin
        logger.info(
            f"Positivity cross-check (tensor_square={tensor_square}, power={power}, "
            f"trials={len(states)}): min relative eigenvalue {min_relative:.3e}, refuted={refuted}"
        )
        return PositivityCrosscheck(
            trials=len(states),
            power=power,
            tensor_square=tensor_square,
            min_eigenvalue=min_eigenvalue,
            min_relative_eigenvalue=min_relative,
            refuted=refuted,
        )

    def normalized_power(self, superop: SuperOperator, operator: ndarray, n: int) -> ndarray:
        """(r^-1 M)^n (H)."""
        radius = float(np.max(np.abs(eigenvalues(superop))))
        matrix = superop.matrix / radius
        vector = vec(np.asarray(operator, dtype=complex))
        for _ in range(n):
            vector = matrix @ vector
        return unvec(vector, superop.dim_out)

    def cesaro_average(self, superop: SuperOperator, operator: ndarray, n: int) -> ndarray:
        """(1/n) sum_{k<n} (r^-1 M)^k (H)."""
        radius = float(np.max(np.abs(eigenvalues(superop))))
        matrix = superop.matrix / radius
        vector = vec(np.asarray(operator, dtype=complex))
        total = np.zeros_like(vector)
        for _ in range(n):
            total += vector
            vector = matrix @ vector
        return unvec(total / n, superop.dim_out)
