"""Exception types raised across the package.

Everything derives from :class:`RelvarError` so callers (the search
coordinator, the CLI) can catch the whole family in one place.
"""


class RelvarError(Exception):
    pass


class ConfigError(RelvarError, ValueError):
    pass


# -- dependence estimation
class LengthMismatchError(RelvarError, ValueError):
    pass


class ZeroVarianceError(RelvarError, ValueError):
    pass


class TooFewSamplesError(RelvarError, ValueError):
    pass


class NegativeMiError(RelvarError, ValueError):
    pass


class DegenerateCorrelationError(RelvarError, ValueError):
    pass


class NonFiniteValueError(RelvarError, ValueError):
    pass


# -- regression
class TooFewRowsError(RelvarError, ValueError):
    pass


class DimensionMismatchError(RelvarError, ValueError):
    pass


class SingularNormalEquationsError(RelvarError, ArithmeticError):
    pass


class NonFiniteLossError(RelvarError, ArithmeticError):
    pass


class ModelFormatError(RelvarError, ValueError):
    pass


# -- search
class EmptyUniverseError(RelvarError, ValueError):
    pass


class CheckpointCorruptError(RelvarError):
    pass


# -- data
class MissingColumnError(RelvarError, KeyError):
    def __init__(self, name):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"missing column: {self.name!r}"


class UnparsableCellError(RelvarError, ValueError):
    def __init__(self, row, column, text):
        super().__init__(row, column, text)
        self.row = row
        self.column = column
        self.text = text

    def __str__(self):
        return f"cannot parse {self.text!r} as a number (row {self.row}, column {self.column!r})"


class EmptyFileError(RelvarError, ValueError):
    pass


class AllRowsDroppedError(RelvarError, ValueError):
    pass
