"""Exception hierarchy shared by all modules."""


class DeckTrackError(Exception):
    """Base class for every error raised by this package."""


class TooFewPoints(DeckTrackError, ValueError):
    pass


class DegenerateConfiguration(DeckTrackError, ValueError):
    """Correspondences do not determine a unique projection matrix."""


class DegenerateGeometry(DeckTrackError, ValueError):
    """Point sets are collinear or otherwise rank deficient."""


class SingularCamera(DeckTrackError, ValueError):
    pass


class EmptyInput(DeckTrackError, ValueError):
    pass


class RayParallelToDeck(DeckTrackError):
    pass


class IntersectionBehindCamera(DeckTrackError):
    pass


class NoConvergence(DeckTrackError):
    pass


class NoEstimate(DeckTrackError):
    """Not enough usable keypoints to produce a pose."""


class InvalidBinConfig(DeckTrackError, ValueError):
    pass


class DimensionMismatch(DeckTrackError, ValueError):
    pass


class InvalidRig(DeckTrackError, ValueError):
    pass


class OutOfRange(DeckTrackError, ValueError):
    pass


class IdMismatch(DeckTrackError, ValueError):
    pass
