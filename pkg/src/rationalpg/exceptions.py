"""
Errors raised by rationalpg.

Every library error derives from `RationalPGError`, which itself is a
`ValueError` so callers that only guard against bad input keep working.

Classes:
    RationalPGError: Root of the hierarchy.
    ContractViolation: A precondition of an operation was not met.
    StaleDependencyError: A node of a released tape was used.
    EmptyBatchError: An update received no data.
    OracleLimitError: The rationality oracle was asked for more than it can search.
    NumericalError: A gradient or loss became NaN or infinite.
    NonFiniteError: The finite-difference oracle evaluated to a non-finite value.
    ConfigError: An experiment configuration could not be parsed or validated.
"""

from typing import Optional


class RationalPGError(ValueError):
    """Base class for all rationalpg errors."""


class ContractViolation(RationalPGError):
    """Raised when an operation is called outside its preconditions."""


class StaleDependencyError(ContractViolation):
    """Raised when a tape node is used after its tape was released."""


class EmptyBatchError(ContractViolation):
    """Raised when an update receives no trajectories."""


class OracleLimitError(RationalPGError):
    """Raised when the rationality grid search exceeds its action bound."""


class NumericalError(RationalPGError):
    """Raised when a gradient or objective is not finite.

    Attributes:
        edge (Optional[str]): Identifier of the objective edge being processed.
        checkpoint (Optional[str]): Last checkpoint written before the failure.
    """

    def __init__(
        self, message: str, edge: Optional[str] = None, checkpoint: Optional[str] = None
    ) -> None:
        super().__init__(message)
        self.edge = edge
        self.checkpoint = checkpoint


class NonFiniteError(NumericalError):
    """Raised when a finite-difference evaluation returns NaN or infinity."""


class ConfigError(RationalPGError):
    """Raised for configuration problems.

    Attributes:
        line (Optional[int]): Line of the configuration file, when known.
        field (Optional[str]): Dotted name of the offending field, when known.
    """

    def __init__(
        self, message: str, line: Optional[int] = None, field: Optional[str] = None
    ) -> None:
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field is not None:
            location.append(f"field '{field}'")
        prefix = f"[{', '.join(location)}] " if location else ""
        super().__init__(f"{prefix}{message}")
        self.line = line
        self.field = field
