"""Exception and warning types raised across the package."""

from __future__ import annotations


class AdiabaticError(Exception):
    """Base class; ``label`` is the short name written into reports."""

    @property
    def label(self) -> str:
        return type(self).__name__


# matcore
class NotHermitian(AdiabaticError):
    pass


class NoConvergence(AdiabaticError):
    pass


# map_models
class DegenerateAngles(AdiabaticError):
    pass


class FormatError(AdiabaticError):
    pass


class NonUnitarySample(AdiabaticError):
    pass


class SparseGrid(AdiabaticError):
    pass


class DomainError(AdiabaticError):
    """A family was queried outside the parameter range it is defined on."""


# spectral
class ClusterAmbiguity(AdiabaticError):
    pass


class RankChange(AdiabaticError):
    pass


class TrackingAmbiguity(AdiabaticError):
    pass


class GapViolation(AdiabaticError):
    pass


# adiabatic
class LabelMismatch(AdiabaticError):
    pass


class ConsistencyFailure(AdiabaticError):
    pass


class LengthMismatch(AdiabaticError):
    pass


# bench
class InsufficientPoints(AdiabaticError):
    pass


class AtFloor(AdiabaticError):
    pass


class ConfigError(AdiabaticError):
    pass


class EndpointFallback(UserWarning):
    """A one-sided difference replaced the central one at a domain edge."""


class ReunitarizationWarning(UserWarning):
    """Polar projection moved an interpolated sample by more than the noise threshold."""
