"""Exception types shared across the package.

Every error raised on purpose derives from :class:`HybridIDSError` so callers
(the CLI in particular) can map them onto exit codes without catching
unrelated bugs.
"""


class HybridIDSError(Exception):
    """Base class for all deliberate errors."""

    exit_code = 2


class DimensionError(HybridIDSError, ValueError):
    pass


class DomainError(HybridIDSError, ValueError):
    pass


class UsageError(HybridIDSError, ValueError):
    pass


class TapeError(HybridIDSError, RuntimeError):
    pass


class ConfigurationError(HybridIDSError, ValueError):
    pass


class ValidationError(HybridIDSError, ValueError):
    pass


class SchemaError(ValidationError):
    pass


class RowError(ValidationError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ConsistencyError(HybridIDSError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NumericError(HybridIDSError, ArithmeticError):
    """Non-finite values encountered during training or optimisation."""

    exit_code = 3


class DivergenceError(NumericError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch} (loss={loss})")
        self.epoch = epoch
        self.batch = batch


class FoldError(HybridIDSError, ValueError):
    pass


class UndefinedMetricError(HybridIDSError, ValueError):
    pass


class IntegrityError(HybridIDSError, IOError):
    pass


class VersionError(HybridIDSError, IOError):
    pass
