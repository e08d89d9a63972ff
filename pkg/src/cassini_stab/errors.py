"""Exception taxonomy shared by the pipeline modules.

Every error that can surface from a batch run derives from
:class:`CassiniStabError` and carries a process exit code so the CLI can
map failure classes to distinct statuses.
"""

from __future__ import annotations


class CassiniStabError(Exception):
    """Base class for all package errors."""

    exit_code = 8


class DomainError(CassiniStabError, ValueError):
    """An argument is outside the mathematical domain of an operation."""

    exit_code = 8


class SingularDerivativeError(CassiniStabError):
    """A series operation produced a genuine negative half-integer action
    power, which signals an ill-formed (non-polynomial) input series."""

    exit_code = 8


class KeplerConvergenceError(CassiniStabError):
    """Newton iteration on Kepler's equation failed to converge."""

    exit_code = 8


class EquilibriumNotFoundError(CassiniStabError):
    """The equilibrium search did not converge; likely a hyperbolic or
    degenerate parameter region."""

    exit_code = 3


class InconsistentEquilibriumError(CassiniStabError):
    """Linear terms survived a Taylor expansion that was supposed to be
    centered on an equilibrium."""

    exit_code = 3


class NotEllipticError(CassiniStabError):
    """The diagonalized quadratic part is not a pair of harmonic
    oscillators (a sign product came out non-positive)."""

    exit_code = 4


class UntanglingFailedError(CassiniStabError):
    """Newton iteration for the quadratic decoupling parameters failed."""

    exit_code = 4


class ResonanceError(CassiniStabError):
    """A small divisor fell below the resonance threshold.

    Attributes
    ----------
    wave : tuple
        The offending integer wave vector (k1, k3).
    divisor : float
        The value of k . omega.
    step : int or None
        Normalization step at which the resonance occurred.
    """

    exit_code = 5

    def __init__(self, wave, divisor, step=None):
        self.wave = tuple(int(k) for k in wave)
        self.divisor = float(divisor)
        self.step = step
        msg = f"small divisor k.omega = {divisor:.3e} for k = {self.wave}"
        if step is not None:
            msg += f" at normalization step {step}"
        super().__init__(msg)


class DegenerateEstimateError(CassiniStabError):
    """Every normalization order produced a zero or infinite stability
    marker; no meaningful escape time exists."""

    exit_code = 6


class IntegrationError(CassiniStabError):
    """Numerical integration of a validation trajectory failed."""

    exit_code = 7

    def __init__(self, message, sample_index=None):
        self.sample_index = sample_index
        if sample_index is not None:
            message = f"sample {sample_index}: {message}"
        super().__init__(message)


class ConfigError(CassiniStabError):
    """A run configuration file is missing, malformed, or incomplete."""

    exit_code = 2

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
