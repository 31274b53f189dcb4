"""Exception types shared across the package."""


class SdeBnnError(Exception):
    """Base class for all package errors."""


class DomainError(SdeBnnError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ContractError(SdeBnnError, ValueError):
    """Shapes or sizes of inputs violate an operation's contract."""


class ConfigError(SdeBnnError, ValueError):
    """Invalid or unknown configuration value."""


class FormatError(SdeBnnError, ValueError):
    """Malformed file contents."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrationDiverged(SdeBnnError, FloatingPointError):
    """A solver step produced a non-finite state."""

    def __init__(self, t: float, norm: float):
        super().__init__(f"integration diverged at t={t:.6g} (state norm {norm:.3g})")
        self.t = t
        self.norm = norm


class BudgetExceeded(SdeBnnError, RuntimeError):
    """The adaptive solver ran out of steps."""


class ReconstructionError(SdeBnnError, ArithmeticError):
    """The adjoint sweep could not invert a forward step."""
