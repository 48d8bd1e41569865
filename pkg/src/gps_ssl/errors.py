"""Exception hierarchy shared across the package."""


class GPSError(Exception):
    """Base class for all package errors."""


class ArgumentError(GPSError, ValueError):
    pass


class SplitError(GPSError):
    """A split tier came out empty.  ``tier`` names it."""

    def __init__(self, tier: str, message: str = ""):
        self.tier = tier
        super().__init__(f"split tier {tier!r} is empty" + (f": {message}" if message else ""))


class FormatError(GPSError):
    """Malformed bank, parameter or manifest file."""


class EncoderError(GPSError):
    pass


class StateError(GPSError):
    pass


class NumericError(GPSError, ArithmeticError):
    pass


class ConfigError(GPSError):
    pass


class DegenerateLabelError(GPSError):
    pass


class TrainingError(GPSError):
    """Non-finite loss during training; ``step`` is the offending step index."""

    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(f"step {step}: {message}")


class MissingArtifactError(GPSError):
    """A file an earlier pipeline stage should have produced is absent."""

    def __init__(self, path, producer: str):
        self.path = str(path)
        super().__init__(f"missing artifact {self.path} (produced by `{producer}`)")
