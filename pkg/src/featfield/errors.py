"""Exception hierarchy shared across the engine."""


class FeatFieldError(Exception):
    """Base class for all engine errors."""


class InputError(FeatFieldError, ValueError):
    """Caller supplied values outside an operation's domain."""


class StructureError(FeatFieldError, ValueError):
    """Shapes, configs, or caches are inconsistent with each other."""


class DatastoreError(FeatFieldError, OSError):
    """A dataset or checkpoint on disk is missing, truncated, or malformed."""
