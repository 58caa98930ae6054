"""Exception types shared by every module of the package."""


class YoloAntError(Exception):
    """Base class for all package errors."""


class DimensionError(YoloAntError, ValueError):
    """Tensor shapes or channel counts do not line up."""


class GeometryError(YoloAntError, ValueError):
    """A spatial configuration yields an empty or non-integral output."""


class SpecError(YoloAntError, ValueError):
    """A block or layer specification violates its own invariants."""


class CapabilityError(YoloAntError, NotImplementedError):
    """Requested an operation that has no implementation (e.g. no backward)."""


class FormatError(YoloAntError, ValueError):
    """A serialized file is malformed."""


class DomainError(YoloAntError, ValueError):
    """An input lies outside the domain where a metric is defined."""


class ManifestError(YoloAntError, ValueError):
    """A weight container does not match the graph's parameter manifest."""

    def __init__(self, missing, extra, mismatched=()):
        self.missing = sorted(missing)
        self.extra = sorted(extra)
        self.mismatched = sorted(mismatched)
        parts = []
        if self.missing:
            parts.append("missing: " + ", ".join(self.missing))
        if self.extra:
            parts.append("extra: " + ", ".join(self.extra))
        if self.mismatched:
            parts.append("shape mismatch: " + ", ".join(self.mismatched))
        super().__init__("weight manifest mismatch; " + "; ".join(parts))
