"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes do not fit the operation."""


class ValidationError(ValueError):
    """Input data violates a documented precondition."""


class ParseError(ValidationError):
    """A data file could not be parsed."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class ConfigError(ValueError):
    """Unknown or inconsistent configuration value."""


class GenerationError(RuntimeError):
    """Synthetic graph generation produced an unusable graph."""


class TrainingError(RuntimeError):
    """Training diverged or could not proceed."""
