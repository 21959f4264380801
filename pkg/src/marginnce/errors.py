"""Exception types shared across the package."""


class MarginNCEError(ValueError):
    pass


class ZeroVector(MarginNCEError):
    pass


class DimensionMismatch(MarginNCEError):
    pass


class NearSingular(MarginNCEError):
    """Angle gradient requested where sin(theta) is too small to divide by."""


class BetaNotOne(MarginNCEError):
    pass


class DegenerateWeight(MarginNCEError):
    pass


class ConfigError(MarginNCEError):
    pass
