"""Error hierarchy shared by services and mapped to exit codes by the commands."""


class SleepStagerError(Exception):
    """Base class for all domain errors."""

    exit_code = 1


class DataError(SleepStagerError, ValueError):
    """Malformed input files, inconsistent recordings, empty partitions."""

    exit_code = 2


class ShapeError(SleepStagerError, ValueError):
    """Tensor or configuration shape contract violated."""

    exit_code = 2


class NumericError(SleepStagerError, ArithmeticError):
    """Non-finite loss or another numerical failure."""

    exit_code = 3
