"""Exception hierarchy shared across the pipeline.

Every error raised on a data or validation path derives from NmgradError so
callers (and the CLI) can translate failures into exit codes without string
matching.
"""

from __future__ import annotations


class NmgradError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(NmgradError):
    """Input violates a documented precondition (shape, range, finiteness)."""


class DataFormatError(NmgradError):
    """A data file is malformed (bad JSON line, missing field, bad value)."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:"
            if line is not None:
                prefix += f"{line}:"
            prefix += " "
        super().__init__(prefix + message)


class CoordinateCollisionError(ValidationError):
    """Two tiles of one slide share a grid coordinate."""


class ContainerError(NmgradError):
    """Base class for binary container failures."""


class BadMagicError(ContainerError):
    """File does not start with the expected magic bytes."""


class TruncatedPayloadError(ContainerError):
    """File ends before the payload promised by its header."""


class DimensionMismatchError(ContainerError):
    """Stored dimensions disagree with each other or with expectations."""


class MissingScaleError(NmgradError):
    """An embedding row or matrix required by the scale mode is absent."""


class EmptyBagError(ValidationError):
    """An aggregation input has no instances (or an empty region)."""


class SingleClassError(ValidationError):
    """A metric that needs both classes received only one."""


class UnknownRegionError(NmgradError):
    """An annotation references a region id that does not exist."""

    def __init__(self, offenders):
        self.offenders = list(offenders)
        listed = ", ".join(f"{s}/{r}" for s, r in self.offenders)
        super().__init__(f"annotations reference unknown regions: {listed}")


class SlideMismatchError(ValidationError):
    """Two inputs that must describe the same slide disagree on slide_id."""
