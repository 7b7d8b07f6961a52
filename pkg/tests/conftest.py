import pytest

from driftlab.lattice import JumpDistribution


@pytest.fixture
def p_drift():
    """The d=1 law used in most desk-scale experiments: drift -0.5."""
    return JumpDistribution((0.25,), (0.75,))


@pytest.fixture
def p_sym():
    return JumpDistribution((0.5,), (0.5,))


@pytest.fixture
def p_d2():
    return JumpDistribution((0.2, 0.15), (0.3, 0.35))
