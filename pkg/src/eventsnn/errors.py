"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data or configuration violates a declared bound or schema."""


class ParseError(ValidationError):
    """An event file is malformed; the message names the line or byte offset."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite objective value."""
