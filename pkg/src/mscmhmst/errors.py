"""Exception types shared across the package.

Each class carries the process exit code the CLI maps it to.
"""


class MSCMHMSTError(Exception):
    exit_code = 1


class ConfigurationError(MSCMHMSTError, ValueError):
    exit_code = 2


class DataError(MSCMHMSTError):
    exit_code = 3


class CheckpointError(MSCMHMSTError):
    exit_code = 4
