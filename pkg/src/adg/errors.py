"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class AdgError(Exception):
    """Base class for all solver errors."""

    exit_code = 1


class ConfigError(AdgError):
    """Bad or unknown configuration input."""

    exit_code = 2


class ParseError(AdgError):
    """Malformed mesh file."""

    exit_code = 3


class NonConforming(AdgError):
    """Mesh connectivity violates the conforming-triangulation contract."""

    exit_code = 3


class NegativeArea(AdgError):
    """Degenerate or inverted triangle."""

    exit_code = 3


class RemeshFailure(AdgError):
    """Metric-driven remeshing could not produce a valid mesh."""

    exit_code = 3


class NonAdmissible(AdgError):
    """State outside the physical set (positive density and pressure)."""

    exit_code = 4


class NonAdmissibleAtQuadrature(NonAdmissible):
    """Inadmissible state detected at a specific quadrature node."""

    def __init__(self, element, node, message=""):
        self.element = int(element)
        self.node = int(node)
        text = f"inadmissible state in element {element} at quadrature node {node}"
        if message:
            text += f": {message}"
        super().__init__(text)


class Diverged(AdgError):
    """Damped iteration failed to reduce the residual."""

    exit_code = 4


class DegenerateDerivatives(AdgError):
    """Directional derivative content too small to orient an element."""

    exit_code = 4


class MaxLevelsReached(AdgError):
    """Adaptation hit the level cap before meeting the tolerance.

    Carries the best-so-far result so callers can still emit artifacts.
    """

    exit_code = 4

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class LinearSolveFailure(AdgError):
    """Krylov solver stagnated before reaching the requested tolerance."""

    exit_code = 5


class LocalSolveFailure(AdgError):
    """Per-element reconstruction solve failed."""

    exit_code = 5


class VerificationFailure(AdgError):
    """One or more identity checks failed in verify mode."""

    exit_code = 6
