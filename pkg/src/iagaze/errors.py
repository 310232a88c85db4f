class IAError(Exception):
    """Base class for errors the CLI reports as validation failures (exit 1)."""


class ManifestError(IAError):
    """A manifest line failed to parse."""

    def __init__(self, path, line_no, msg):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {msg}")


class ValidationError(IAError, ValueError):
    pass


class SplitError(IAError, ValueError):
    pass


class LeakageError(IAError):
    """IA training ids overlap the ids a host model is evaluated on."""


class ConfigError(IAError, ValueError):
    pass


class MetricError(IAError, ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, step, loss):
        self.epoch, self.step, self.loss = epoch, step, loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, step {step}")
