"""Builders and loader for the bundled instruments."""
import logging
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from qhmm.config import Settings
from qhmm.models.instrument import Instrument, Outcome
from qhmm.services.instrument_service import InstrumentService
from qhmm.utils.io import load_instrument

logger = logging.getLogger(__name__)

BUNDLED_DIR = Path(__file__).resolve().parent.parent / "fixtures"


class UnknownFixtureError(ValueError):
    """Raised when a fixture name is neither configured nor bundled."""
    pass


def iid_coin(p: float = 0.5) -> Instrument:
    """Scalar instrument: heads (value 1) with probability p, tails (value 0)."""
    return Instrument(
        dim=1,
        outcomes=[
            Outcome(label="heads", value=1.0, kraus=[[[np.sqrt(p)]]]),
            Outcome(label="tails", value=0.0, kraus=[[[np.sqrt(1 - p)]]]),
        ],
    )


def cyclic_shift(dim: int = 3, initial_state: Optional[np.ndarray] = None) -> Instrument:
    """Outcome i with Kraus |i><i-1| and value i: irreducible, period dim."""
    outcomes = []
    for i in range(dim):
        kraus = np.zeros((dim, dim))
        kraus[i, (i - 1) % dim] = 1.0
        outcomes.append(Outcome(label=str(i), value=float(i), kraus=[kraus]))
    return Instrument(dim=dim, outcomes=outcomes, initial_state=initial_state)


def classical_chain() -> Instrument:
    """Two-state chain T = [[0.9, 0.2], [0.1, 0.8]] with transition values i + 2j."""
    transition = np.array([[0.9, 0.2], [0.1, 0.8]])
    values = np.array([[i + 2 * j for j in range(2)] for i in range(2)], dtype=float)
    return InstrumentService.embed_stochastic_matrix(transition, values)


def qubit_unitary_mixture(q: float = 0.7) -> Instrument:
    """Hadamard with probability q (value +1), phase gate otherwise (value -1)."""
    hadamard = np.array([[1, 1], [1, -1]]) / np.sqrt(2)
    phase = np.diag([1, 1j])
    return Instrument(
        dim=2,
        outcomes=[
            Outcome(label="hadamard", value=1.0, kraus=[np.sqrt(q) * hadamard]),
            Outcome(label="phase", value=-1.0, kraus=[np.sqrt(1 - q) * phase]),
        ],
    )


def block_diagonal() -> Instrument:
    """Two decoupled classical states; reducible."""
    return Instrument(
        dim=2,
        outcomes=[
            Outcome(label="stay0", value=0.0, kraus=[np.diag([1.0, 0.0])]),
            Outcome(label="stay1", value=1.0, kraus=[np.diag([0.0, 1.0])]),
        ],
    )


BUILDERS: dict[str, Callable[[], Instrument]] = {
    "iid-coin": iid_coin,
    "shift-d3": cyclic_shift,
    "classical-chain": classical_chain,
    "qubit-unitary-mixture": qubit_unitary_mixture,
    "block-diagonal": block_diagonal,
}


def fixture_path(name: str, settings: Settings) -> Path:
    """Location of a fixture JSON, honouring settings.fixture_dir."""
    directory = Path(settings.fixture_dir) if settings.fixture_dir else BUNDLED_DIR
    return directory / f"{name}.json"


def load_fixture(name: str, settings: Settings) -> Instrument:
    """
    Load a named fixture from its JSON file.

    Raises:
        UnknownFixtureError: If the name is not configured or has no file
    """
    if name not in settings.fixture_names:
        raise UnknownFixtureError(
            f"Unknown fixture '{name}'; available: {', '.join(settings.fixture_names)}"
        )
    path = fixture_path(name, settings)
    if not path.exists():
        raise UnknownFixtureError(f"Fixture file {path} does not exist")
    logger.debug(f"Loading fixture {name} from {path}")
    return load_instrument(path)
