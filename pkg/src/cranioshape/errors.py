"""Exception types shared across the package.

The CLI maps each family onto a process exit code, so library code should
raise the most specific class that applies.
"""


class CranioShapeError(Exception):
    """Base class for all package errors."""


class MeshFormatError(CranioShapeError, ValueError):
    """A mesh, landmark or model file could not be parsed."""


class ValidationError(CranioShapeError, ValueError):
    """Inputs violate a documented precondition."""


class NumericalError(CranioShapeError, RuntimeError):
    """A numerical routine failed (singular system, non-finite result)."""


class ChecksumError(MeshFormatError):
    """A stored binary blob does not match its recorded digest."""
