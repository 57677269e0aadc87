"""Exception classes shared across the package.

The CLI prints ``type(exc).__name__`` as the machine-parsable error class,
so the names here are part of the command-line contract.
"""


class CapspruneError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ShapeError(CapspruneError, ValueError):
    """Tensor extents do not agree with what an operation requires."""


class ConfigError(CapspruneError, ValueError):
    """A configuration is invalid (bad ratio, zero capsules, bad geometry...)."""


class DomainError(CapspruneError, ValueError):
    """An input lies outside an operation's mathematical domain."""


class NonFiniteError(CapspruneError, FloatingPointError):
    """A NaN or Inf value was produced or supplied."""


class StaleTapeError(CapspruneError, RuntimeError):
    """A tape was replayed after its backward pass already ran."""


class ContractError(CapspruneError, ValueError):
    """A caller broke an API precondition (e.g. non-scalar loss)."""


class FormatError(CapspruneError, ValueError):
    """A data or checkpoint file has an unexpected layout or magic number."""


class LengthError(FormatError):
    """A data file is truncated or its length is inconsistent with its header."""


class InputError(CapspruneError, ValueError):
    """Input values are invalid (e.g. a label outside the class range)."""


class StructuralError(CapspruneError, ValueError):
    """A prune plan does not fit the model it is applied to."""


class NoRunsError(CapspruneError, FileNotFoundError):
    """A report was requested for a directory holding no completed run."""
