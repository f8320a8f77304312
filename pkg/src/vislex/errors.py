"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """An API precondition was violated (stale state, non-scalar loss, ...)."""


class ConfigError(ValueError):
    """Invalid configuration value or file."""


class FormatError(ValueError):
    """Malformed on-disk artifact. Carries the file and byte offset."""

    def __init__(self, message: str, path: str = "", offset: int = -1):
        self.path = path
        self.offset = offset
        where = f" [{path} @ byte {offset}]" if path or offset >= 0 else ""
        super().__init__(message + where)


class DataError(ValueError):
    """Dataset contents violate an expectation (bad label, missing id, ...)."""


class SamplingError(RuntimeError):
    """Batch construction drew an invalid sample (e.g. negative == positive)."""


class UsageError(ValueError):
    """Command-line arguments are inconsistent or incomplete."""


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss; carries the offending batch id."""

    def __init__(self, message: str, batch_id: str = ""):
        self.batch_id = batch_id
        super().__init__(message)
