"""Exception types shared across the package."""


class MFAError(Exception):
    """Base class for all package errors."""


class StructureError(MFAError):
    """Invalid topology or candidate structure."""


class DimensionMismatchError(MFAError):
    """Parameters dimensioned for a different structure."""


class NonDissipativeCycleError(MFAError):
    """A cycle of allocation fractions that does not leak mass."""

    def __init__(self, message, cycle=()):
        super().__init__(message)
        self.cycle = tuple(cycle)


class NotApplicableError(MFAError):
    """A quantity references a node or edge absent from the structure."""


class UndefinedRatioError(MFAError):
    """Ratio with a zero denominator."""


class PredictionError(MFAError):
    """A data record could not be predicted."""

    def __init__(self, message, record_id=None):
        super().__init__(message)
        self.record_id = record_id


class ConfigError(MFAError):
    """Configuration problems; carries every violation found."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class NumericalError(MFAError):
    """Numerical failure during inference or attribution."""


class NonConvergenceError(NumericalError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DegeneratePosteriorError(NumericalError):
    pass


class SingularSystemError(NumericalError):
    pass


class MissingArtifactError(MFAError):
    """A downstream command was run before the command producing its inputs."""

    def __init__(self, path, command):
        super().__init__(f"missing {path}; run `{command}` first")
        self.path = path
        self.command = command
