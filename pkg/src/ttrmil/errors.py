"""Error taxonomy shared across the package.

Everything raised on purpose derives from TtrmilError so the CLI can map any
expected failure onto a single-line stderr report with exit code 1.  Errors
that are really malformed-argument problems also subclass ValueError so that
plain `except ValueError` keeps working for library users.
"""


class TtrmilError(Exception):
    """Base class for every deliberate error in this package."""


class DimensionMismatch(TtrmilError, ValueError):
    """Operand shapes do not line up."""


class NonFiniteError(TtrmilError, FloatingPointError):
    """A tensor picked up a NaN or Inf; the computation is in an error state."""


class UndefinedMetricError(TtrmilError, ValueError):
    """A ranking metric has no comparable pairs (or a single class)."""


class ExcludedCaseError(TtrmilError, ValueError):
    """A case censored before the horizon has no defined classification label."""


class DegenerateMaskError(TtrmilError, RuntimeError):
    """A mask left a bag with zero patches."""

    def __init__(self, case_id: str, message: str | None = None):
        self.case_id = case_id
        super().__init__(message or f"mask removes every patch of case {case_id!r}")


class BagFormatError(TtrmilError, ValueError):
    """A serialized bag is corrupt; `offset` points at the offending byte."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class ManifestError(TtrmilError, ValueError):
    """A cohort manifest is malformed or references missing files."""


class ConfigError(TtrmilError, ValueError):
    """A run configuration has unknown keys or out-of-range values."""
