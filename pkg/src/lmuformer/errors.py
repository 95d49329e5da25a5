"""Error taxonomy. Each class maps to a distinct CLI exit code."""


class LMUFormerError(Exception):
    exit_code = 1


class ConfigError(LMUFormerError):
    """Invalid configuration, shapes, or arguments."""

    exit_code = 2


class DataError(LMUFormerError):
    """Malformed or inconsistent dataset files."""

    exit_code = 3


class CheckpointError(LMUFormerError):
    """Bad magic, version, or truncated checkpoint."""

    exit_code = 4


class NumericError(LMUFormerError):
    """Non-finite values or failed numeric preconditions."""

    exit_code = 5


class ContractError(LMUFormerError):
    """Runtime contract violation (e.g. non-binary spikes fed to a spiking op)."""

    exit_code = 6
