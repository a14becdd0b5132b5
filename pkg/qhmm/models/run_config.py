"""Run configuration for one command-line invocation."""
from enum import Enum
from typing import Optional

import numpy as np
from numpy import ndarray
from pydantic import BaseModel, Field, field_validator, model_validator

from qhmm.models.reports import TailDirection


class Command(str, Enum):
    """Available subcommands."""
    VALIDATE = "validate"
    CLASSIFY = "classify"
    CGF = "cgf"
    BOUNDS = "bounds"
    RATES = "rates"
    VARIANCE = "variance"
    SIMULATE = "simulate"
    ORACLE = "oracle"
    FCS_EXPORT = "fcs-export"
    FCS_IMPORT = "fcs-import"


class RunConfig(BaseModel):
    """Parsed and validated command parameters."""
    command: Command
    instrument_path: Optional[str] = Field(None, description="Instrument JSON (FCS JSON for fcs-import)")
    fixture: Optional[str] = Field(None, description="Bundled fixture name")
    output: Optional[str] = Field(None, description="Output file path")
    report: Optional[str] = Field(None, description="CLT report path for simulate")

    theta: Optional[tuple[float, float, int]] = Field(None, description="theta grid start:stop:steps")
    a: Optional[float] = None
    n_values: list[int] = Field(default_factory=list)
    n: Optional[int] = Field(None, ge=1)
    trials: int = Field(default=1000, ge=1)
    seed: int = Field(default=0, ge=0)
    delta: Optional[float] = None
    t: Optional[float] = None
    direction: TailDirection = TailDirection.UPPER

    eig_tol: Optional[float] = Field(None, gt=0)
    positivity_margin: Optional[float] = Field(None, gt=0)

    @field_validator("theta", mode="before")
    @classmethod
    def parse_theta(cls, v):
        """Accept 'a:b:steps'."""
        if isinstance(v, str):
            parts = v.split(":")
            if len(parts) != 3:
                raise ValueError("theta grid must look like start:stop:steps")
            return float(parts[0]), float(parts[1]), int(parts[2])
        return v

    @field_validator("theta")
    @classmethod
    def validate_theta(cls, v):
        """At least one grid point."""
        if v is not None and v[2] < 1:
            raise ValueError("theta grid needs at least one step")
        return v

    @field_validator("n_values", mode="before")
    @classmethod
    def parse_n_values(cls, v):
        """Accept '8,9,10'."""
        if isinstance(v, str):
            return [int(part) for part in v.split(",") if part.strip()]
        return v

    @field_validator("n_values")
    @classmethod
    def validate_n_values(cls, v):
        """Every n is at least 1."""
        if any(n < 1 for n in v):
            raise ValueError("every n must be at least 1")
        return v

    @field_validator("t")
    @classmethod
    def validate_t(cls, v):
        """Moderate-deviation exponent lies in (0, 1/2)."""
        if v is not None and not 0 < v < 0.5:
            raise ValueError("t must lie in (0, 1/2)")
        return v

    @model_validator(mode="after")
    def validate_command(self):
        """One instrument source and the parameters each command needs."""
        if (self.instrument_path is None) == (self.fixture is None):
            raise ValueError("Give exactly one of an instrument path or --fixture")
        if self.command is Command.FCS_IMPORT and self.fixture is not None:
            raise ValueError("fcs import reads an FCS JSON path, not a fixture")
        required = {
            Command.CGF: ("theta",),
            Command.BOUNDS: ("a", "n_values"),
            Command.RATES: ("delta",),
            Command.SIMULATE: ("n",),
            Command.ORACLE: ("n",),
        }.get(self.command, ())
        missing = [name for name in required if getattr(self, name) in (None, [])]
        if missing:
            raise ValueError(f"{self.command.value} needs {', '.join(missing)}")
        if self.command is Command.RATES and (self.t is None) != (self.n is None):
            raise ValueError("rates needs both --t and --n for moderate-deviation bounds")
        return self

    def theta_grid(self) -> ndarray:
        """The theta values of the cgf grid."""
        start, stop, steps = self.theta
        return np.linspace(start, stop, steps)

    def settings_overrides(self) -> dict:
        """Tolerance overrides to apply on top of the environment settings."""
        overrides = {}
        if self.eig_tol is not None:
            overrides["eig_tol"] = self.eig_tol
        if self.positivity_margin is not None:
            overrides["positivity_margin"] = self.positivity_margin
        return overrides
