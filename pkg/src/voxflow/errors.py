"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so the command line layer
never needs a lookup table of its own.
"""


class VoxflowError(Exception):
    exit_code = 1


class UsageError(VoxflowError):
    exit_code = 2


class ParameterError(VoxflowError, ValueError):
    exit_code = 2


class FormatError(VoxflowError):
    exit_code = 3


class DimensionError(VoxflowError, ValueError):
    exit_code = 3


class ShapeError(DimensionError):
    pass


class NumericError(VoxflowError, ArithmeticError):
    exit_code = 4


class DegenerateStepError(NumericError):
    pass


class CacheMissError(VoxflowError, KeyError):
    exit_code = 5

    def __str__(self):
        # KeyError quotes its argument; keep the message readable.
        return str(self.args[0]) if self.args else "cache miss"


class CollisionError(VoxflowError):
    exit_code = 5


class AlignmentError(VoxflowError):
    exit_code = 5
