"""Exception hierarchy shared by every stage of the pipeline."""


class ArticsepError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class ConfigurationError(ArticsepError):
    exit_code = 2


class FormatError(ArticsepError):
    """Malformed or unsupported file contents."""


class InputError(ArticsepError):
    """Arguments violate an operation's preconditions."""


class OOVError(ArticsepError):
    def __init__(self, words):
        self.words = list(words)
        super().__init__("out-of-vocabulary word(s): " + ", ".join(self.words))


class MappingError(ArticsepError):
    """A phoneme has no manner-of-articulation entry."""


class InitializationError(ArticsepError):
    pass


class AlignmentError(ArticsepError):
    """Forced alignment is infeasible for the given line."""


class SamplingError(ArticsepError):
    pass


class MetricError(ArticsepError):
    pass


class TrainingError(ArticsepError):
    """Numerical failure during model estimation."""

    exit_code = 4
