"""Shared fixtures: settings, services and the canonical instruments."""

import pytest

from qhmm.config import Settings
from qhmm.services.cgf_service import CgfService
from qhmm.services.deviation_service import DeviationService
from qhmm.services.instrument_service import InstrumentService
from qhmm.services.perron_frobenius_service import PerronFrobeniusService
from qhmm.services.simulation_service import SimulationService
from qhmm.services.variance_service import VarianceService
from qhmm.utils import fixtures


@pytest.fixture
def settings():
    """Default settings."""
    return Settings()


@pytest.fixture
def instrument_service(settings):
    """InstrumentService with default settings."""
    return InstrumentService(settings)


@pytest.fixture
def pf_service(settings, instrument_service):
    """PerronFrobeniusService sharing the instrument service."""
    return PerronFrobeniusService(settings, instrument_service)


@pytest.fixture
def cgf_service(settings, pf_service):
    """CgfService sharing the Perron-Frobenius service."""
    return CgfService(settings, pf_service)


@pytest.fixture
def variance_service(settings, pf_service):
    """VarianceService sharing the Perron-Frobenius service."""
    return VarianceService(settings, pf_service)


@pytest.fixture
def deviation_service(settings, variance_service):
    """DeviationService sharing the variance service."""
    return DeviationService(settings, variance_service)


@pytest.fixture
def simulation_service(settings, variance_service):
    """SimulationService sharing the variance service."""
    return SimulationService(settings, variance_service)


@pytest.fixture
def coin():
    """Fair i.i.d. coin, values 1 and 0."""
    return fixtures.iid_coin()


@pytest.fixture
def shift():
    """Cyclic shift on three levels."""
    return fixtures.cyclic_shift(3)


@pytest.fixture
def chain():
    """Two-state classical chain with transition values i + 2j."""
    return fixtures.classical_chain()


@pytest.fixture
def qubit():
    """Hadamard / phase mixture with q = 0.7."""
    return fixtures.qubit_unitary_mixture()


@pytest.fixture
def block():
    """Reducible block-diagonal instrument."""
    return fixtures.block_diagonal()


@pytest.fixture
def build():
    """Build a canonical instrument by its fixture name."""
    return lambda name: fixtures.BUILDERS[name]()
