"""Exception types shared across the package."""


class StateError(RuntimeError):
    """An operation was called before its required state was established."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values and the run cannot continue."""


class DegenerateOutputError(NumericError):
    """The network produced a zero vector that cannot be unit-normalized."""


class DegenerateDistributionError(ValueError):
    """All candidate masses are zero; no probability vector can be formed."""


class UndefinedCorrelationError(ValueError):
    """Pearson correlation is undefined because one input has zero variance."""


class DatasetError(ValueError):
    """The dataset cannot support the requested operation."""


class FormatError(ValueError):
    """A serialized file is malformed.

    Carries the byte offset at which the problem was detected.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
