"""Exception types shared across the pipeline."""


class MVLidarError(Exception):
    """Base class for all pipeline errors."""


class MalformedFile(MVLidarError):
    """File contents violate the declared binary or text format."""


class NonFiniteValue(MVLidarError):
    """NaN or infinity encountered where finite values are required."""


class ShapeMismatch(MVLidarError):
    """Array shapes disagree with the expected layout."""


class EmptyMask(MVLidarError):
    """A loss mask selects no pixels."""


class DegenerateBox(MVLidarError):
    """Box has non-positive width or length."""


class EmptyCluster(MVLidarError):
    """Cluster aggregation received no members."""


class LengthMismatch(MVLidarError):
    """Paired sequences differ in length."""


class MissingPair(MVLidarError):
    """A prediction has no matching ground-truth counterpart."""


class DuplicateName(MVLidarError):
    """A named entry occurs twice in a weight blob."""


class ConfigError(MVLidarError):
    """Invalid or inconsistent configuration."""
