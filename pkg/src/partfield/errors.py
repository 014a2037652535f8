"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class BehindCameraError(ValueError):
    """A point has non-positive depth in the camera frame."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class IngestionError(IOError):
    """A feature file is missing or malformed."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class ConfigError(ValueError):
    pass


class PersistenceError(IOError):
    pass


class LoadError(RuntimeError):
    """Checkpoint cannot be loaded against the requested config."""
