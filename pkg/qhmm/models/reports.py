"""Result models produced by the analysis services."""
from enum import Enum
from typing import Optional

from numpy import ndarray
from pydantic import BaseModel, ConfigDict, Field, model_validator

from qhmm.core.operators import DensityOperator, HermitianOperator, SuperOperator


class TailDirection(str, Enum):
    """Tail event direction."""
    UPPER = "upper"
    LOWER = "lower"

    @property
    def sign(self) -> float:
        """+1 for the upper tail, -1 for the lower tail."""
        return 1.0 if self is TailDirection.UPPER else -1.0


class PositivityVerdict(str, Enum):
    """Three-valued outcome of an eigenvector positivity test."""
    POSITIVE = "positive"
    NOT_POSITIVE = "not_positive"
    INDETERMINATE = "indeterminate"


class PrimitivityMethod(str, Enum):
    """How primitivity was decided."""
    TENSOR_SQUARE = "tensor_square"
    PERIPHERAL_SPECTRUM = "peripheral_spectrum"


class PerronFrobeniusData(BaseModel):
    """Perron-Frobenius eigendata of a tilted map, trace-1 rho and min-eig-1 A."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    theta: float
    lam: float = Field(..., gt=0, description="Perron-Frobenius eigenvalue lambda_theta")
    rho: DensityOperator
    a_op: HermitianOperator
    a_norm: float = Field(..., gt=0, description="Operator norm of A_theta")
    spectral_gap: float = Field(default=0.0, description="1 - |second eigenvalue| / lambda")

    @property
    def trace_a_rho(self) -> float:
        """Tr A_theta rho_theta."""
        return float((self.a_op.matrix * self.rho.matrix.T).sum().real)


class SpectralDiagnostics(BaseModel):
    """Diagnostics of one positivity/multiplicity test."""
    spectral_radius: float
    peripheral_spectrum: list[tuple[float, float]] = Field(default_factory=list)
    geometric_multiplicity: int
    right_margin: float
    left_margin: float
    verdict: PositivityVerdict


class Classification(BaseModel):
    """Irreducibility and primitivity verdicts with diagnostics."""
    irreducible: bool
    primitive: bool
    irreducible_verdict: PositivityVerdict
    primitive_verdict: PositivityVerdict
    primitivity_method: PrimitivityMethod
    map_diagnostics: SpectralDiagnostics
    tensor_diagnostics: Optional[SpectralDiagnostics] = None
    trace_preserving: bool = False
    fixed_space_dim: Optional[int] = None
    fixed_state_rank: Optional[int] = None

    @model_validator(mode="after")
    def validate_implication(self):
        """primitive implies irreducible."""
        if self.primitive and not self.irreducible:
            raise ValueError("A primitive map must be irreducible")
        return self


class PositivityCrosscheck(BaseModel):
    """Randomized positivity-improving check of (iota + M)^(D^2 - 1)."""
    trials: int
    power: int
    tensor_square: bool
    min_eigenvalue: float
    min_relative_eigenvalue: float
    refuted: bool


class TailBoundReport(BaseModel):
    """Finite-n exponent bounds for one tail event."""
    direction: TailDirection
    a: float
    n: int
    mean: float
    exponent_lower_bound: float
    lower_theta: float
    exponent_upper_bound: Optional[float] = None
    upper_theta: Optional[float] = None
    upper_s: Optional[float] = None
    upper_feasible: bool = False
    smallest_feasible_n: Optional[int] = None
    rate: float
    profile_evaluations: int = 0
    oracle_neg_log_prob: Optional[float] = None


class ModerateDeviationReport(BaseModel):
    """Exponent bounds at a moderate level, scaled by n^(2t-1), next to the limiting rate."""
    delta: float
    t: float
    n: int
    direction: TailDirection
    level: float
    rate: float
    scaled_lower: float
    scaled_upper: Optional[float] = None
    upper_feasible: bool = False


class FundamentalData(BaseModel):
    """Projector map, fundamental matrix and mixing diagnostic of a primitive map."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    rho0: DensityOperator
    lambda_tilde: SuperOperator
    z: SuperOperator
    second_eigenvalue_modulus: float


class VarianceReport(BaseModel):
    """Asymptotic variance with its parts and cross-checks."""
    stationary_variance: float
    correction: float
    asymptotic_variance: float
    finite_difference: float
    second_eigenvalue_modulus: float
    n: Optional[int] = None
    finite_n_scaled: Optional[float] = None


class Trajectory(BaseModel):
    """One sampled realization of the measurement process."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    trial: int
    seed: int
    outcomes: list[str]
    values: list[float]
    states: Optional[list[ndarray]] = None

    @property
    def mean(self) -> float:
        """Sample mean of the values."""
        return sum(self.values) / len(self.values) if self.values else 0.0


class SumDistribution(BaseModel):
    """Exact law of the sum of n outcome values jointly with the hidden state."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    n: int
    atoms: dict[float, ndarray]

    def probabilities(self) -> dict[float, float]:
        """Sum value -> Tr rho_s, sorted by sum."""
        return {s: float(self.atoms[s].trace().real) for s in sorted(self.atoms)}

    def total_probability(self) -> float:
        """Sum of all atom probabilities."""
        return float(sum(self.probabilities().values()))

    def marginal_state(self) -> ndarray:
        """Operator sum over atoms, equal to Lambda^n(rho)."""
        return sum(self.atoms.values())


class CltReport(BaseModel):
    """Kolmogorov-Smirnov comparison of the normalized sample mean with its Gaussian limit."""
    n: int
    trials: int
    seed: int
    mean: float
    variance: float
    ks_statistic: float
    p_value: float
