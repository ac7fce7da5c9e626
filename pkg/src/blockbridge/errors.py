"""Exception types shared across the package, mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid configuration (bad parameter combination, schema violation). Exit code 2."""


class InputError(ValueError):
    """Invalid runtime input (shape mismatch, forbidden token). Exit code 2."""


class TaskParseError(InputError):
    """A token sequence does not parse under the task grammar; message names the offset."""


class LineageError(RuntimeError):
    """A required upstream checkpoint is missing or inconsistent. Exit code 3."""


class NumericError(RuntimeError):
    """Non-finite loss or other numeric failure, with diagnostics. Exit code 4."""
