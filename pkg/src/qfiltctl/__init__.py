"""Continuously observed open quantum systems: filtering, LQG control and checks.

Modules
-------
operators   density matrices, couplings, positivity repair
ito         germ matrices of quantum stochastic differentials
master      Lindblad evolution and coherent control
filtering   diffusive and counting filters, trajectories, ensembles
lqg         Kalman filter, Riccati flows, optimal feedback, duality
bellman     HJB and counting Bellman residuals, policy comparison
scenario    YAML scenario schema
cli         the ``qfiltctl`` command
"""
from .errors import NumericalError, QFiltError, ValidationError
from .operators import CouplingSet, DensityMatrix

__version__ = "0.1.0"

__all__ = ["CouplingSet", "DensityMatrix", "NumericalError", "QFiltError", "ValidationError", "__version__"]
