"""Application configuration using pydantic-settings."""
from functools import lru_cache
from typing import Optional
from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings loaded from environment variables.

    This is the single record holding every numerical tolerance; services
    receive it through their constructor so that all classifications share
    the same tolerance semantics.
    """

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="allow",
        populate_by_name=True,
    )

    # Application Settings
    app_name: str = "qhmm"
    app_version: str = "1.0.0"
    environment: str = Field(default="development", alias="ENVIRONMENT")
    debug: bool = Field(default=False, alias="DEBUG")

    # Logging Settings
    log_level: str = Field(default="INFO", alias="LOG_LEVEL")
    log_format: str = Field(default="json", alias="LOG_FORMAT")  # json or text

    # Parallelism
    threads: int = Field(default=1, ge=1, alias="QHMM_THREADS")

    # Tolerances
    hermitian_tol: float = Field(default=1e-10, alias="QHMM_HERMITIAN_TOL")
    psd_tol: float = Field(default=1e-10, alias="QHMM_PSD_TOL")
    trace_tol: float = Field(default=1e-10, alias="QHMM_TRACE_TOL")
    kraus_tol: float = Field(default=1e-10, alias="QHMM_KRAUS_TOL")
    eig_tol: float = Field(default=1e-8, alias="QHMM_EIG_TOL")
    positivity_margin: float = Field(default=1e-8, alias="QHMM_POSITIVITY_MARGIN")
    zero_margin: float = Field(default=1e-12, alias="QHMM_ZERO_MARGIN")

    # Tilting
    overflow_guard: float = Field(default=700.0, alias="QHMM_OVERFLOW_GUARD")

    # CGF profile
    fd_step: float = Field(default=1e-4, alias="QHMM_FD_STEP")
    inverse_tol: float = Field(default=1e-10, alias="QHMM_INVERSE_TOL")
    inverse_max_iter: int = Field(default=200, alias="QHMM_INVERSE_MAX_ITER")
    strict_convexity_tol: float = Field(default=1e-10, alias="QHMM_STRICT_CONVEXITY_TOL")

    # Tail-bound optimizer
    grid_size: int = Field(default=40, ge=4, alias="QHMM_GRID_SIZE")
    descent_iterations: int = Field(default=30, ge=0, alias="QHMM_DESCENT_ITERATIONS")
    golden_iterations: int = Field(default=40, ge=1, alias="QHMM_GOLDEN_ITERATIONS")
    s_min: float = Field(default=1e-3, gt=0, alias="QHMM_S_MIN")
    s_max: float = Field(default=10.0, gt=0, alias="QHMM_S_MAX")
    feasibility_max_doublings: int = Field(default=40, alias="QHMM_FEASIBILITY_MAX_DOUBLINGS")

    # Classification
    primitivity_tensor_max_dim: int = Field(default=6, alias="QHMM_PRIMITIVITY_TENSOR_MAX_DIM")

    # Exact oracles
    oracle_max_entries: float = Field(default=1e8, alias="QHMM_ORACLE_MAX_ENTRIES")
    sum_key_digits: int = Field(default=12, alias="QHMM_SUM_KEY_DIGITS")
    fcs_dense_max_dim: int = Field(default=512, alias="QHMM_FCS_DENSE_MAX_DIM")

    # Simulation
    simulation_chunk_size: int = Field(default=1024, ge=1, alias="QHMM_SIMULATION_CHUNK_SIZE")
    zero_probability_tol: float = Field(default=1e-14, alias="QHMM_ZERO_PROBABILITY_TOL")

    # Bundled fixtures
    fixture_names: list[str] = Field(
        default=[
            "iid-coin",
            "shift-d3",
            "classical-chain",
            "qubit-unitary-mixture",
            "block-diagonal",
        ],
        alias="QHMM_FIXTURE_NAMES",
    )
    fixture_dir: Optional[str] = Field(default=None, alias="QHMM_FIXTURE_DIR")

    @field_validator("fixture_names", mode="before")
    @classmethod
    def parse_fixture_names(cls, v):
        """Parse fixture names from string or list."""
        if isinstance(v, str):
            return [name.strip() for name in v.split(",") if name.strip()]
        return v

    @field_validator("log_format")
    @classmethod
    def validate_log_format(cls, v):
        """Only json and text formatters exist."""
        if v not in ("json", "text"):
            raise ValueError("log_format must be 'json' or 'text'")
        return v


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


# Global settings instance
settings = get_settings()
