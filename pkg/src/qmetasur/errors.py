"""Exception types shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class RangeError(ToolkitError):
    """Value falls outside the representable exponent range."""


class DomainError(ToolkitError):
    """Input violates a mathematical precondition (NaN, out of bounds, ...)."""


class ParseError(ToolkitError):
    """Token sequence is not well formed."""


class ArityError(ToolkitError):
    """Wrong number of encoded segments."""


class DegenerateError(ToolkitError):
    """Input set is degenerate (too small, all-identical, ...)."""


class ConfigError(ToolkitError):
    """Invalid or inconsistent run configuration."""


class TrainingError(ToolkitError):
    """Training aborted (non-finite loss or similar)."""
