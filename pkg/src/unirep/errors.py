"""Exception hierarchy shared by every subsystem."""


class UnirepError(Exception):
    pass


class DimensionError(UnirepError, ValueError):
    """Tensor or parameter shapes disagree along a named axis."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ConfigurationError(UnirepError, ValueError):
    pass


class LabelError(UnirepError, ValueError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DomainIndexError(UnirepError, IndexError):
    pass


class UnfrozenMomentsError(UnirepError, RuntimeError):
    pass


class PurityError(UnirepError, ValueError):
    pass


class LifecycleError(UnirepError, RuntimeError):
    pass


class ScheduleError(UnirepError, ValueError):
    pass


class DivergenceError(UnirepError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DegenerateChannelError(UnirepError, ValueError):
    pass


class GenerationError(UnirepError, ValueError):
    pass


class FormatError(UnirepError, ValueError):
    """Malformed binary file; ``offset`` locates the first bad byte."""

    def __init__(self, message, offset=None, record=None):
        super().__init__(message)
        self.offset = offset
        self.record = record


class CompatibilityError(UnirepError, ValueError):
    pass


class ConfigError(UnirepError, ValueError):
    """Aggregated experiment-config violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
