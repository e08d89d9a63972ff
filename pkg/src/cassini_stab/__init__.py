"""Effective-stability toolkit for the synchronous spin-orbit problem.

Builds the averaged resonant Hamiltonian of a triaxial body around its
Cassini state, normalizes it to high order with Lie series, and turns the
remainder bounds into Nekhoroshev-style escape-time estimates and
parameter-scan stability maps.
"""

from .errors import (
    CassiniStabError,
    ConfigError,
    DegenerateEstimateError,
    DomainError,
    EquilibriumNotFoundError,
    InconsistentEquilibriumError,
    IntegrationError,
    KeplerConvergenceError,
    NotEllipticError,
    ResonanceError,
    SingularDerivativeError,
    UntanglingFailedError,
)
from .pseries import (
    Poly4,
    PoissonSeries,
    PoissonTerm,
    TruncationPolicy,
    WeightVector,
    evaluate,
    homogeneous_part,
    multiply,
    poisson_bracket,
    weighted_norm,
)

__version__ = "0.1.0"
