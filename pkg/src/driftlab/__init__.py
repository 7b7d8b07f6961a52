"""driftlab: simulator and statistical checks for infection spread among
biased random walks on the integer lattice."""

__version__ = "0.1.0"

from .lattice import JumpDistribution, drift, sample_jump, validate  # noqa: F401
from .kernel import BACKEND_NAME  # noqa: F401
