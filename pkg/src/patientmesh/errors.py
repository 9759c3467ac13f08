"""Exception hierarchy shared across the package.

The CLI maps each class to its own exit code, so keep new errors under one
of these branches.
"""


class PatientMeshError(Exception):
    pass


class ConfigError(PatientMeshError, ValueError):
    pass


class DataFormatError(PatientMeshError, ValueError):
    """A file exists but its content cannot be parsed."""


class InvariantError(DataFormatError):
    """Parsed content violates a structural invariant."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShardFormatError(DataFormatError):
    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path} @ byte {offset}: {message}")


class NumericAbortError(PatientMeshError, ArithmeticError):
    pass


class VisibilityRejectionError(PatientMeshError, RuntimeError):
    def __init__(self, message, record_ids=()):
        self.record_ids = list(record_ids)
        super().__init__(message)
