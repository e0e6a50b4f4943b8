"""Exception types shared by all modules.

Precondition failures map to CLI exit code 2, numerical failures to exit code 1.
"""


class ArtifactError(Exception):
    """Base class for all library errors."""


class PreconditionError(ArtifactError, ValueError):
    """Input rejected before any numerical work was attempted."""


class DomainMismatch(PreconditionError):
    """Objects living on different domains were combined."""


class InfiniteSymmetricDifference(PreconditionError):
    """The symmetric difference of two sets carries infinite mass."""


class OutOfRange(PreconditionError):
    """A requested transfer amount is not reachable."""


class MassMismatch(PreconditionError):
    """Two densities that must carry equal mass do not."""


class EndSetMismatch(PreconditionError):
    """Two densities disagree on which ends have finite mass."""


class InfeasibleTargets(PreconditionError):
    """Balancing targets violate the sum or positivity conditions."""


class FormatError(PreconditionError):
    """A field, map or charge file is malformed."""

    def __init__(self, message, field=None, offset=None):
        detail = message
        if field is not None:
            detail += f" (field {field!r})"
        if offset is not None:
            detail += f" (byte offset {offset})"
        super().__init__(detail)
        self.field = field
        self.offset = offset


class NumericalError(ArtifactError, RuntimeError):
    """A numerical procedure failed to converge or broke an invariant."""


class InvalidMap(NumericalError):
    """A sampled map is not an orientation preserving diffeomorphism."""
