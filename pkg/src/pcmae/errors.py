"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: UsageError/ConfigError and their
subclasses exit with 1, NumericError and anything unexpected with 2.
"""


class PcmaeError(Exception):
    """Base class for all package errors."""


class UsageError(PcmaeError):
    """A caller violated an operation's precondition (bad argument, bad shape)."""


class ConfigError(UsageError):
    """Invalid or inconsistent configuration (unknown keys, variant mismatch)."""


class ParseError(UsageError):
    """Malformed input file; message names the offending line."""


class CheckpointError(UsageError):
    """Checkpoint cannot be loaded: bad version, truncation, checksum, names."""


class NumericError(PcmaeError):
    """A numeric invariant broke (NaN/Inf in a forward op, diverging loss)."""
