"""Exception types shared across the library."""


class AkrPlanError(Exception):
    """Base class for all library errors."""


class ParseError(AkrPlanError):
    """Malformed input document (URDF subset, OBJ, JSON spec)."""


class StructureError(AkrPlanError):
    """Kinematic graph violates tree invariants (cycles, multiple roots, ...)."""


class UnsupportedFeatureError(AkrPlanError):
    """Input uses a feature outside the supported subset."""

    def __init__(self, feature: str, message: str | None = None):
        self.feature = feature
        super().__init__(message or f"unsupported feature: {feature}")


class UnknownLinkError(AkrPlanError, KeyError):
    """Referenced link does not exist in the tree."""


class DimensionError(AkrPlanError, ValueError):
    """Vector length does not match the expected dimension."""


class NamingError(AkrPlanError):
    """Link or joint name collision."""


class GeometryError(AkrPlanError):
    """Degenerate or unusable geometry."""


class ResourceLimitError(AkrPlanError):
    """A configurable resource budget (e.g. voxel cell count) was exceeded."""


class InfeasibleError(AkrPlanError):
    """No feasible trajectory was found.

    Carries the best diagnostics seen so that callers can report why the
    problem failed instead of silently returning an invalid trajectory.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
