"""Exception taxonomy shared across the library and the CLI.

The CLI maps these onto its exit codes: ConfigError -> 2, DataError -> 3,
NumericalAbort -> 4. Plain ValueError is reserved for API misuse.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad field values, unknown keys, inconsistent specs."""


class ShapeError(ValueError):
    """Tensor operands whose shapes do not conform; the message names the axes."""


class DataError(RuntimeError):
    """Dataset or file-format problem (bad magic, truncation, impossible sampling)."""


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss; carries the iteration diagnostic."""
