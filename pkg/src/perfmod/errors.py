"""Exception hierarchy shared across the toolkit."""


class PerfModError(Exception):
    """Base class for all toolkit errors."""


class InputError(PerfModError, ValueError):
    """Invalid argument, malformed file, or violated precondition."""


class RankDeficientError(InputError):
    def __init__(self, message, dependent_terms=()):
        super().__init__(message)
        self.dependent_terms = tuple(dependent_terms)


class SamplingError(PerfModError):
    """An executor failed while measuring a point.

    ``partial`` holds the samples gathered before the failure.
    """

    def __init__(self, message, point=None, partial=None):
        super().__init__(message)
        self.point = point
        self.partial = partial


class MissingModelError(PerfModError, LookupError):
    def __init__(self, message, missing=(), available=()):
        super().__init__(message)
        self.missing = tuple(missing)
        self.available = tuple(available)


class RepositoryConflictError(PerfModError):
    pass


class IntegrityError(PerfModError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
