"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`SingularSurfaceError`. Invalid input
additionally derives from ``ValueError``; numerical breakdowns derive from ``RuntimeError``.
"""


class SingularSurfaceError(Exception):
    """Base class for all package errors."""


class InputError(SingularSurfaceError, ValueError):
    """Invalid parameters or incompatible inputs."""


class NumericalError(SingularSurfaceError, RuntimeError):
    """A numerical procedure failed or produced data violating a certified property."""


# parameter gates
class InvalidParameter(InputError):
    pass


class BadDimensions(InputError):
    pass


class EtaTooLarge(InputError):
    pass


class ExponentGapViolated(InputError):
    pass


# grids and fields
class GridTooCoarse(InputError):
    pass


class NonpositiveU(InputError):
    pass


class DomainMismatch(InputError):
    pass


class WindowTooNarrow(InputError):
    pass


class EmptyK(InputError):
    pass


class OutsideWindow(InputError):
    pass


class ZeroTestFunction(InputError):
    pass


class SupportTouchesBoundary(InputError):
    pass


class MissingArtifact(InputError):
    pass


# numerical failures
class StepFailure(NumericalError):
    pass


class PropertyViolation(NumericalError):
    pass


class BoundViolation(NumericalError):
    pass


class ContinuationStall(NumericalError):
    pass


class NewtonDiverged(NumericalError):
    pass


class SqueezeViolated(NumericalError):
    pass


class JacobianDegenerate(NumericalError):
    pass


class InversionDiverged(NumericalError):
    pass


class PatchMismatch(NumericalError):
    pass


class TailRootFailure(NumericalError):
    pass


class EigenSolverFailure(NumericalError):
    pass
