"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors exit 2, validation and
configuration errors exit 3, numeric failures exit 4.
"""


class TreediffError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(TreediffError):
    """A config file or override could not be parsed; names the offending key."""


class ValidationError(TreediffError):
    """A declared invariant or precondition is violated."""


class FormatError(TreediffError):
    """An external file (IDX dataset, archive) is malformed."""


class IntegrityError(TreediffError):
    """A checkpoint archive is corrupt or truncated."""


class CompatibilityError(TreediffError):
    """Checkpoints built against different configs or stages were mixed."""


class CapacityError(TreediffError):
    """A structural tree edit would exceed the depth or leaf budget."""


class NumericError(TreediffError):
    """A non-finite value surfaced where a finite one is required."""
