class CohortForgeError(Exception):
    """Base class for all errors raised by cohortforge."""


class ValidationError(CohortForgeError, ValueError):
    pass


class IntervalError(ValidationError):
    pass


class SchemaError(CohortForgeError, ValueError):
    pass


class ContainerError(CohortForgeError):
    pass


class IntegrityError(CohortForgeError):
    """Raised when a pipeline stage detects lost or corrupted rows."""

    def __init__(self, message, report=None, findings=None):
        super().__init__(message)
        self.report = report
        self.findings = findings or []


class SanityCheckError(CohortForgeError):
    def __init__(self, message, findings=None):
        super().__init__(message)
        self.findings = findings or []
