"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes: ConfigError -> 2, StateError -> 3,
NumericError / DimensionError -> 4.
"""


class DersError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(DersError):
    """Shapes do not conform (matmul operands, delta vs. base, batch width)."""


class ConfigError(DersError):
    """Invalid configuration: bad fields, unknown keys, inconsistent settings."""


class ParameterError(ConfigError):
    """A single operation argument is out of its documented range."""


class StateError(DersError):
    """The operation needs state the object does not carry.

    Examples: compressing a model that was not vanilla-upcycled, loading a
    checkpoint with a newer format version, missing input files.
    """


class CorruptionError(StateError):
    """Stored data fails an integrity check (checksum, truncation, invariants)."""


class NumericError(DersError):
    """A numeric invariant broke: non-finite loss or activations, divergence."""
