"""Instrument and finitely correlated state data models."""
from typing import Optional

import numpy as np
from numpy import ndarray
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from qhmm.core.operators import (
    DensityOperator,
    DimensionMismatchError,
    HermitianOperator,
    SuperOperator,
    is_completely_positive,
    is_trace_preserving,
)


class FcsModelError(ValueError):
    """Raised when a finitely correlated state generator is invalid."""
    pass


class Outcome(BaseModel):
    """One measurement outcome: label, real value and the Kraus list of C_omega."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    label: str = Field(..., min_length=1, description="Outcome label")
    value: float = Field(..., description="Outcome value x_omega")
    kraus: tuple[ndarray, ...] = Field(default=(), description="Kraus operators of C_omega")

    @field_validator("kraus", mode="before")
    @classmethod
    def validate_kraus(cls, v):
        """Store Kraus operators as read-only complex arrays."""
        operators = []
        for k in v:
            array = np.array(k, dtype=complex)
            if array.ndim != 2:
                raise DimensionMismatchError(f"Kraus operator must be a matrix, got shape {array.shape}")
            array.setflags(write=False)
            operators.append(array)
        return tuple(operators)

    def superoperator(self, dim: int) -> SuperOperator:
        """C_omega as a superoperator."""
        return SuperOperator.from_kraus(self.kraus, dim_in=dim, dim_out=dim)


class Instrument(BaseModel):
    """
    Finite family {C_omega} of CP maps in Kraus form with outcome values.

    Structural checks (shapes) happen at construction. Trace preservation and
    finiteness are checked by InstrumentService.validate so that an invalid
    instrument can still be loaded and reported on.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dim: int = Field(..., ge=1, description="Hidden system dimension d")
    outcomes: tuple[Outcome, ...] = Field(default=(), description="Ordered outcomes")
    initial_state: Optional[ndarray] = Field(default=None, description="Initial state, I/d if absent")

    @model_validator(mode="after")
    def validate_shapes(self):
        """All Kraus operators are d x d; labels unique; initial state d x d."""
        labels = [o.label for o in self.outcomes]
        if len(set(labels)) != len(labels):
            raise ValueError("Outcome labels must be unique")
        for outcome in self.outcomes:
            for k in outcome.kraus:
                if k.shape != (self.dim, self.dim):
                    raise DimensionMismatchError(
                        f"Kraus operator of outcome '{outcome.label}' has shape {k.shape}, "
                        f"expected ({self.dim}, {self.dim})"
                    )
        if self.initial_state is not None and np.shape(self.initial_state) != (self.dim, self.dim):
            raise DimensionMismatchError("Initial state shape does not match instrument dimension")
        return self

    @property
    def labels(self) -> list[str]:
        """Outcome labels in order."""
        return [o.label for o in self.outcomes]

    @property
    def values(self) -> ndarray:
        """Outcome values in order."""
        return np.array([o.value for o in self.outcomes], dtype=float)

    def state(self) -> DensityOperator:
        """The configured initial state."""
        if self.initial_state is None:
            return DensityOperator.maximally_mixed(self.dim)
        return DensityOperator(matrix=self.initial_state)


class FcsModel(BaseModel):
    """TP-CP generator Gamma from the hidden system into output (x) hidden, with observable A."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    hidden_dim: int = Field(..., ge=1)
    output_dim: int = Field(..., ge=1)
    gamma: SuperOperator
    observable: HermitianOperator
    initial_state: Optional[ndarray] = None

    @model_validator(mode="after")
    def validate_generator(self):
        """Gamma maps d_H into d_out * d_H and is TP and CP."""
        if self.gamma.dim_in != self.hidden_dim:
            raise FcsModelError("Gamma input dimension must equal the hidden dimension")
        if self.gamma.dim_out != self.output_dim * self.hidden_dim:
            raise FcsModelError("Gamma output dimension must equal output_dim * hidden_dim")
        if self.observable.dim != self.output_dim:
            raise FcsModelError("Observable must act on the output system")
        if not is_trace_preserving(self.gamma):
            raise FcsModelError("Gamma is not trace-preserving")
        if not is_completely_positive(self.gamma):
            raise FcsModelError("Gamma is not completely positive")
        if self.initial_state is not None and np.shape(self.initial_state) != (
            self.hidden_dim,
            self.hidden_dim,
        ):
            raise FcsModelError("Initial state shape does not match hidden dimension")
        return self


class InvariantCheck(BaseModel):
    """Outcome of a single invariant check."""
    name: str
    passed: bool
    residual: Optional[float] = None
    message: Optional[str] = None


class ValidationReport(BaseModel):
    """Pass/fail per instrument invariant with measured residuals."""
    passed: bool
    dim: int
    outcome_count: int
    checks: list[InvariantCheck] = Field(default_factory=list)

    @property
    def failures(self) -> list[InvariantCheck]:
        """Checks that did not pass."""
        return [c for c in self.checks if not c.passed]
