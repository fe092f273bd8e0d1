"""Exception types shared across the toolkit."""


class GraphSmoothError(Exception):
    """Base class for toolkit errors."""


class DegenerateInputError(GraphSmoothError, ValueError):
    """Raised for inputs that are formally valid but numerically degenerate,
    e.g. zero-norm vectors fed to a cosine similarity."""


class DataFormatError(GraphSmoothError, ValueError):
    """Raised when a dataset file does not match its declared binary format."""


class ConfigError(GraphSmoothError, ValueError):
    """Raised for invalid or inconsistent configuration before any compute runs."""
