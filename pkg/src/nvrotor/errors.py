"""Exception hierarchy shared by the simulator modules."""


class NvRotorError(Exception):
    """Base class for all library errors."""


class DomainError(NvRotorError, ValueError):
    """A computation was requested outside its mathematical domain."""


class AntiCrossingError(DomainError):
    """The qubit splitting is too close to zero for a dispersive treatment."""


class ImaginaryFrequencyError(DomainError):
    """A squared oscillator frequency came out negative."""


class DegenerateTrapError(DomainError):
    """The trap provides no confinement for the beta libration."""


class NoRootError(DomainError):
    """The target function does not change sign over the search bracket."""


class SingularFactorizationError(DomainError):
    """The normal-ordered SU(1,1) factorization has a vanishing denominator."""


class PoleError(DomainError):
    """The composite echo kernel hits its pole."""


class BranchTrackingError(DomainError):
    """The square-root branch could not be followed continuously."""


class InstabilityError(DomainError):
    """The beta mode is unstable for the repelled spin branch."""


class ConvergenceError(NvRotorError):
    """A refinement loop did not reach the requested tolerance."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class TruncationError(NvRotorError):
    """A truncated thermal state discards too much probability."""
