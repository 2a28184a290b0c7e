class FominLabError(Exception):
    """Base class for errors raised by fominlab."""


class ModelEvaluationError(FominLabError):
    """A drift or Jacobian produced non-finite values for finite input."""


class DivergenceError(FominLabError):
    """One or more simulated paths left the finite range."""

    def __init__(self, message, path_ids=()):
        super().__init__(message)
        self.path_ids = tuple(int(i) for i in path_ids)


class DegenerateSampleError(FominLabError):
    """An empirical measure has no spread along some coordinate."""


class ConfigError(FominLabError):
    """An experiment configuration failed validation."""
