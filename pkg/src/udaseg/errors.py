"""Exception hierarchy shared by every stage of the pipeline."""


class UdaSegError(Exception):
    """Base class for all package errors."""


class SvolError(UdaSegError, OSError):
    """Malformed or inconsistent SVOL file."""


class DegenerateInputError(UdaSegError, ValueError):
    """Input is valid in type but carries no usable signal (constant volume, empty overlap)."""


class UndefinedMetricError(UdaSegError, ValueError):
    """A metric cannot be evaluated, e.g. ASSD with an empty surface."""


class ConfigurationError(UdaSegError, ValueError):
    pass


class DependencyError(UdaSegError):
    """A pipeline stage was run before the stages it consumes."""

    def __init__(self, stage, missing):
        self.stage = stage
        self.missing = list(missing)
        super().__init__(
            f"stage '{stage}' requires upstream stage(s) that have not run: {', '.join(self.missing)}"
        )


class TrainingError(UdaSegError, RuntimeError):
    """Training aborted (empty data, non-finite loss)."""
