"""Error types mapped to CLI exit codes: usage=1, data=2, numeric=3."""


class UsageError(Exception):
    exit_code = 1


class DataError(Exception):
    exit_code = 2


class NumericError(Exception):
    exit_code = 3
