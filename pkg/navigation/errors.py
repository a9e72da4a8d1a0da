"""
Errors — exception hierarchy shared by the navigation and orchestration layers.

Every numerical failure derives from NavigationError so callers can catch
the whole family at the campaign or CLI boundary.
"""


class NavigationError(Exception):
    """Base class for numerical failures."""


class ConfigError(Exception):
    """Invalid or unreadable run configuration."""


# ─── Terrain ───

class OutOfHull(NavigationError):
    """A GridMap was queried outside its sampled lattice."""


class GridParseError(NavigationError):
    """A grid CSV file could not be parsed."""


class TooSmallLattice(NavigationError):
    """A grid has fewer than 4 nodes along an axis (bicubic support)."""


# ─── Plant & Filter ───

class NonPositiveDt(NavigationError):
    pass


class FactorizationFailure(NavigationError):
    """A covariance is not positive semi-definite within tolerance."""


class DegenerateWeights(NavigationError):
    """Every particle likelihood vanished during a weight update."""


class BadCount(NavigationError):
    pass


# ─── Fisher Information ───

class SingularP0(NavigationError):
    pass


class SingularQ(NavigationError):
    """The process noise covariance Q is not positive definite."""


class SingularInner(NavigationError):
    """(J + D11) is too ill-conditioned to invert."""


class NonPositiveTrace(NavigationError):
    pass


# ─── Harness ───

class NonPlaneMap(NavigationError):
    """The Kalman oracle only applies to PlaneMap terrain."""


class CampaignFailure(NavigationError):
    """Too many Monte Carlo runs were excluded."""
