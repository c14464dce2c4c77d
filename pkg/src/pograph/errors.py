"""Exception hierarchy shared by every pograph module."""


class PographError(Exception):
    """Base class for library errors."""


class InvalidParameter(PographError, ValueError):
    pass


class InvalidArgument(PographError, ValueError):
    pass


class SchedulingError(PographError):
    """The graph cannot host the requested algorithm schedule."""


class VisibilityViolation(PographError):
    """A query rule tried to read a record that is not one of its ancestors."""

    def __init__(self, node, requested):
        super().__init__(f"node {node} requested record {requested}, which is not an ancestor")
        self.node = node
        self.requested = requested


class DomainViolation(PographError):
    pass


class InvalidQuery(PographError, ValueError):
    pass


class UnsupportedOracle(PographError):
    pass


class UnsupportedInstance(PographError):
    pass


class ConvergenceFailure(PographError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class BudgetError(PographError):
    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown or {}


class ConfigError(PographError):
    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
