"""Error hierarchy shared by the search, learner and environment modules"""

from typing import Any, Dict, Optional


class CurriculumBOError(Exception):
    """Root of every error raised by this package"""


class InvalidArgumentError(CurriculumBOError, ValueError):
    """A caller passed a value outside an operation's domain"""


class InvalidCurriculumError(InvalidArgumentError):
    """Changepoints are not strictly ascending inside (0, max_epoch)"""

    def __init__(self, message: str, changepoints: Optional[list] = None):
        super().__init__(message)
        self.changepoints = changepoints


class InvalidStateError(CurriculumBOError, RuntimeError):
    """An operation was attempted on an object in the wrong state"""


class NumericalFailureError(CurriculumBOError, ArithmeticError):
    """A numerical routine produced or received non-finite values"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def __str__(self) -> str:
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        return f"{base} ({details})"


class ConfigError(CurriculumBOError, ValueError):
    """A run configuration could not be validated"""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
