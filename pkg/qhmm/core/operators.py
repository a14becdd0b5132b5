"""
Complex matrix and superoperator substrate.

Vectorization uses the column-stacking convention everywhere:
vec(A X B) = (B^T kron A) vec(X). A Kraus map X -> K X K^dagger therefore has the
matrix representation conj(K) kron K, and a superoperator from d_in x d_in to
d_out x d_out operators is stored as a (d_out**2, d_in**2) complex matrix.

Model validators (hermitian_tol, psd_tol, trace_tol, kraus_tol) read the
process-wide get_settings(), i.e. the environment. A Settings object handed to a
service does not reach them; the command-line overrides only touch eig_tol and
positivity_margin, which the services read directly.
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy import ndarray
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy import linalg

from qhmm.config import get_settings

logger = logging.getLogger(__name__)


class DimensionMismatchError(ValueError):
    """Raised when operand dimensions do not fit together."""
    pass


class NotHermitianError(ValueError):
    """Raised when a matrix is not Hermitian within tolerance."""
    pass


class NotDensityOperatorError(ValueError):
    """Raised when a matrix is not a valid state."""
    pass


class SpectralError(ArithmeticError):
    """Raised when the eigensolver fails or returns non-finite values."""
    pass


def vec(matrix: ndarray) -> ndarray:
    """Column-stack a matrix into a vector."""
    return np.asarray(matrix).reshape(-1, order="F")


def unvec(vector: ndarray, rows: int, cols: Optional[int] = None) -> ndarray:
    """Inverse of :func:`vec`."""
    cols = rows if cols is None else cols
    return np.asarray(vector).reshape((rows, cols), order="F")


def hermitian_part(matrix: ndarray) -> ndarray:
    """Return (X + X^dagger) / 2."""
    matrix = np.asarray(matrix)
    return (matrix + matrix.conj().T) / 2


def hermiticity_residual(matrix: ndarray) -> float:
    """Largest entry of |X - X^dagger| relative to max(1, largest entry of |X|)."""
    matrix = np.asarray(matrix)
    scale = max(1.0, float(np.max(np.abs(matrix))) if matrix.size else 1.0)
    return float(np.max(np.abs(matrix - matrix.conj().T))) / scale if matrix.size else 0.0


def _frozen(array: ndarray) -> ndarray:
    array = np.array(array, dtype=complex)
    array.setflags(write=False)
    return array


class HermitianOperator(BaseModel):
    """d x d complex Hermitian matrix."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    matrix: ndarray

    @field_validator("matrix", mode="before")
    @classmethod
    def validate_matrix(cls, v):
        """Require a square Hermitian matrix; store its exact Hermitian part."""
        array = np.asarray(v, dtype=complex)
        if array.ndim != 2 or array.shape[0] != array.shape[1] or array.shape[0] == 0:
            raise DimensionMismatchError(f"Expected a square matrix, got shape {array.shape}")
        residual = hermiticity_residual(array)
        if residual > get_settings().hermitian_tol:
            raise NotHermitianError(f"Matrix is not Hermitian (residual {residual:.3e})")
        return _frozen(hermitian_part(array))

    @property
    def dim(self) -> int:
        """Hilbert space dimension d."""
        return self.matrix.shape[0]

    def eigvalsh(self) -> ndarray:
        """Ascending real eigenvalues."""
        return linalg.eigvalsh(self.matrix)

    def trace(self) -> float:
        """Real trace."""
        return float(np.trace(self.matrix).real)


class DensityOperator(HermitianOperator):
    """Positive semi-definite, unit-trace Hermitian matrix."""

    @model_validator(mode="after")
    def validate_state(self):
        """Check positivity and normalization."""
        settings = get_settings()
        min_eig = float(linalg.eigvalsh(self.matrix)[0])
        if min_eig < -settings.psd_tol:
            raise NotDensityOperatorError(f"State has negative eigenvalue {min_eig:.3e}")
        trace = float(np.trace(self.matrix).real)
        if abs(trace - 1.0) > settings.trace_tol:
            raise NotDensityOperatorError(f"State trace {trace!r} differs from 1")
        return self

    @classmethod
    def maximally_mixed(cls, dim: int) -> "DensityOperator":
        """I / d."""
        return cls(matrix=np.eye(dim) / dim)

    @classmethod
    def pure(cls, vector: Sequence[complex]) -> "DensityOperator":
        """|psi><psi| for a (not necessarily normalized) vector psi."""
        psi = np.asarray(vector, dtype=complex).reshape(-1)
        psi = psi / np.linalg.norm(psi)
        return cls(matrix=np.outer(psi, psi.conj()))

    @classmethod
    def basis(cls, dim: int, index: int) -> "DensityOperator":
        """|i><i|."""
        psi = np.zeros(dim, dtype=complex)
        psi[index] = 1.0
        return cls.pure(psi)


class SuperOperator(BaseModel):
    """Linear map between operator spaces, optionally backed by Kraus operators."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dim_in: int
    dim_out: int
    matrix: ndarray
    kraus: Optional[Tuple[ndarray, ...]] = None

    @model_validator(mode="before")
    @classmethod
    def validate_shapes(cls, data):
        """Check shapes and Kraus consistency."""
        matrix = np.asarray(data["matrix"], dtype=complex)
        dim_in, dim_out = int(data["dim_in"]), int(data["dim_out"])
        if matrix.shape != (dim_out * dim_out, dim_in * dim_in):
            raise DimensionMismatchError(
                f"Superoperator matrix shape {matrix.shape} does not match "
                f"dims in={dim_in}, out={dim_out}"
            )
        kraus = data.get("kraus")
        if kraus is not None:
            kraus = tuple(_frozen(k) for k in kraus)
            for k in kraus:
                if k.shape != (dim_out, dim_in):
                    raise DimensionMismatchError(f"Kraus operator shape {k.shape} invalid")
            expected = kraus_to_matrix(kraus, dim_in, dim_out)
            scale = max(1.0, float(np.max(np.abs(expected))))
            residual = float(np.max(np.abs(expected - matrix))) if matrix.size else 0.0
            if residual > get_settings().kraus_tol * scale:
                raise ValueError(f"Kraus list disagrees with matrix (residual {residual:.3e})")
        return {"dim_in": dim_in, "dim_out": dim_out, "matrix": _frozen(matrix), "kraus": kraus}

    @property
    def dim(self) -> int:
        """Dimension d of a map from d x d to d x d operators."""
        if self.dim_in != self.dim_out:
            raise DimensionMismatchError("Map is not an endomorphism")
        return self.dim_in

    @classmethod
    def from_kraus(
        cls, kraus: Sequence[ndarray], dim_in: Optional[int] = None, dim_out: Optional[int] = None
    ) -> "SuperOperator":
        """Build X -> sum_k K_k X K_k^dagger."""
        kraus = [np.asarray(k, dtype=complex) for k in kraus]
        if not kraus:
            if dim_in is None or dim_out is None:
                raise DimensionMismatchError("Empty Kraus list needs explicit dimensions")
            return cls.zero(dim_in, dim_out)
        dim_out, dim_in = kraus[0].shape
        return cls(
            dim_in=dim_in,
            dim_out=dim_out,
            matrix=kraus_to_matrix(kraus, dim_in, dim_out),
            kraus=kraus,
        )

    @classmethod
    def from_matrix(
        cls, matrix: ndarray, dim_in: int, dim_out: Optional[int] = None
    ) -> "SuperOperator":
        """Wrap a matrix representation."""
        return cls(dim_in=dim_in, dim_out=dim_in if dim_out is None else dim_out, matrix=matrix)

    @classmethod
    def zero(cls, dim_in: int, dim_out: Optional[int] = None) -> "SuperOperator":
        """The zero map."""
        dim_out = dim_in if dim_out is None else dim_out
        return cls(
            dim_in=dim_in,
            dim_out=dim_out,
            matrix=np.zeros((dim_out * dim_out, dim_in * dim_in), dtype=complex),
        )


def kraus_to_matrix(kraus: Sequence[ndarray], dim_in: int, dim_out: int) -> ndarray:
    """sum_k conj(K_k) kron K_k."""
    matrix = np.zeros((dim_out * dim_out, dim_in * dim_in), dtype=complex)
    for k in kraus:
        k = np.asarray(k, dtype=complex)
        matrix += np.kron(k.conj(), k)
    return matrix


def identity_map(dim: int) -> SuperOperator:
    """The identity map iota on d x d operators."""
    return SuperOperator.from_kraus([np.eye(dim)])


def apply_array(superop: SuperOperator, matrix: ndarray) -> ndarray:
    """Apply a map to a raw matrix through its matrix representation."""
    matrix = np.asarray(matrix)
    if matrix.shape != (superop.dim_in, superop.dim_in):
        raise DimensionMismatchError(
            f"Input shape {matrix.shape} does not match map input dim {superop.dim_in}"
        )
    return unvec(superop.matrix @ vec(matrix), superop.dim_out)


def apply_kraus_array(superop: SuperOperator, matrix: ndarray) -> ndarray:
    """Apply a Kraus-backed map directly from its Kraus operators."""
    if superop.kraus is None:
        raise ValueError("Map has no Kraus representation")
    matrix = np.asarray(matrix)
    if matrix.shape != (superop.dim_in, superop.dim_in):
        raise DimensionMismatchError(
            f"Input shape {matrix.shape} does not match map input dim {superop.dim_in}"
        )
    out = np.zeros((superop.dim_out, superop.dim_out), dtype=complex)
    for k in superop.kraus:
        out += k @ matrix @ k.conj().T
    return out


def apply(superop: SuperOperator, operator: HermitianOperator) -> HermitianOperator:
    """Image of a Hermitian operator under a Hermiticity-preserving map.

    Raises:
        DimensionMismatchError: If the operator does not live on the map's input space
        NotHermitianError: If the map does not preserve Hermiticity on this input
    """
    return HermitianOperator(matrix=apply_array(superop, operator.matrix))


def adjoint(superop: SuperOperator) -> SuperOperator:
    """Adjoint with respect to the Hilbert-Schmidt inner product Tr(A^dagger B)."""
    kraus = None
    if superop.kraus is not None:
        kraus = [k.conj().T for k in superop.kraus]
    return SuperOperator(
        dim_in=superop.dim_out,
        dim_out=superop.dim_in,
        matrix=superop.matrix.conj().T,
        kraus=kraus,
    )


def compose(outer: SuperOperator, inner: SuperOperator) -> SuperOperator:
    """outer o inner."""
    if outer.dim_in != inner.dim_out:
        raise DimensionMismatchError("Cannot compose maps with mismatched dimensions")
    kraus = None
    if outer.kraus is not None and inner.kraus is not None:
        kraus = [a @ b for a in outer.kraus for b in inner.kraus]
    return SuperOperator(
        dim_in=inner.dim_in,
        dim_out=outer.dim_out,
        matrix=outer.matrix @ inner.matrix,
        kraus=kraus,
    )


def _kron_vec_permutation(d1: int, d2: int) -> ndarray:
    """Permutation P with vec(A kron B) = P (vec(A) kron vec(B)) for square A, B."""
    i1, j1, i2, j2 = np.indices((d1, d1, d2, d2)).reshape(4, -1)
    big = d1 * d2
    src = (i1 + j1 * d1) * d2 * d2 + (i2 + j2 * d2)
    dst = (i1 * d2 + i2) + (j1 * d2 + j2) * big
    perm = np.zeros((big * big, big * big))
    perm[dst, src] = 1.0
    return perm


def tensor(first: SuperOperator, second: SuperOperator) -> SuperOperator:
    """M1 kron M2 acting on operators of the composite system (first system first)."""
    kraus = None
    if first.kraus is not None and second.kraus is not None:
        kraus = [np.kron(a, b) for a in first.kraus for b in second.kraus]
    p_in = _kron_vec_permutation(first.dim_in, second.dim_in)
    p_out = _kron_vec_permutation(first.dim_out, second.dim_out)
    matrix = p_out @ np.kron(first.matrix, second.matrix) @ p_in.T
    return SuperOperator(
        dim_in=first.dim_in * second.dim_in,
        dim_out=first.dim_out * second.dim_out,
        matrix=matrix,
        kraus=kraus,
    )


def eigenvalues(superop: SuperOperator) -> ndarray:
    """All eigenvalues of the matrix representation.

    Raises:
        SpectralError: If the eigensolver fails or produces non-finite values
    """
    try:
        values = linalg.eigvals(superop.matrix)
    except (linalg.LinAlgError, ValueError) as e:
        logger.error(f"Eigensolver failure: {e}")
        raise SpectralError(f"Eigensolver failed: {e}")
    if not np.all(np.isfinite(values)):
        raise SpectralError("Eigensolver returned non-finite eigenvalues")
    return values


def spectral_radius(superop: SuperOperator) -> float:
    """Maximum modulus over all eigenvalues."""
    return float(np.max(np.abs(eigenvalues(superop))))


def choi_matrix(superop: SuperOperator) -> ndarray:
    """sum_ij E_ij kron M(E_ij)."""
    d_in, d_out = superop.dim_in, superop.dim_out
    choi = np.zeros((d_in * d_out, d_in * d_out), dtype=complex)
    for i in range(d_in):
        for j in range(d_in):
            unit = np.zeros((d_in, d_in), dtype=complex)
            unit[i, j] = 1.0
            choi += np.kron(unit, unvec(superop.matrix @ vec(unit), d_out))
    return choi


def is_completely_positive(superop: SuperOperator, tol: Optional[float] = None) -> bool:
    """Kraus-backed maps are CP by construction; otherwise check the Choi matrix."""
    if superop.kraus is not None:
        return True
    tol = get_settings().psd_tol if tol is None else tol
    choi = choi_matrix(superop)
    if hermiticity_residual(choi) > tol:
        return False
    values = linalg.eigvalsh(hermitian_part(choi))
    return bool(values[0] >= -tol * max(1.0, float(np.max(np.abs(values)))))


def is_trace_preserving(superop: SuperOperator, tol: Optional[float] = None) -> bool:
    """Tr M(X) = Tr X for all X, i.e. M^dagger vec(I) = vec(I)."""
    tol = get_settings().kraus_tol if tol is None else tol
    identity_out = vec(np.eye(superop.dim_out))
    identity_in = vec(np.eye(superop.dim_in))
    residual = np.max(np.abs(superop.matrix.conj().T @ identity_out - identity_in))
    return bool(residual <= tol)


def partial_trace(matrix: ndarray, dims: Tuple[int, int], keep: int) -> ndarray:
    """Trace out one factor of a bipartite operator; keep is 0 or 1."""
    d_a, d_b = dims
    reshaped = np.asarray(matrix).reshape(d_a, d_b, d_a, d_b)
    if keep == 0:
        return np.einsum("ijkj->ik", reshaped)
    if keep == 1:
        return np.einsum("ijil->jl", reshaped)
    raise ValueError("keep must be 0 or 1")


def random_pure_state(rng: np.random.Generator, dim: int) -> ndarray:
    """Haar-random pure state |psi><psi| as a raw matrix."""
    psi = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    psi /= np.linalg.norm(psi)
    return np.outer(psi, psi.conj())


def random_density_matrix(rng: np.random.Generator, dim: int) -> ndarray:
    """Full-rank random state (Ginibre ensemble)."""
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def random_hermitian(rng: np.random.Generator, dim: int) -> ndarray:
    """Random Hermitian matrix with Gaussian entries."""
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return hermitian_part(g)


def kraus_from_choi(
    choi: ndarray, dim_in: int, dim_out: int, tol: Optional[float] = None
) -> list[ndarray]:
    """Kraus operators from the eigendecomposition of a PSD Choi matrix."""
    tol = get_settings().psd_tol if tol is None else tol
    values, vectors = linalg.eigh(hermitian_part(choi))
    scale = max(1.0, float(np.max(np.abs(values)))) if values.size else 1.0
    kraus = []
    for value, vector in zip(values, vectors.T):
        if value > tol * scale:
            kraus.append(np.sqrt(value) * vector.reshape(dim_in, dim_out).T)
    return kraus
