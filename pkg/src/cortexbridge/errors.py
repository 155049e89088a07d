"""Exception hierarchy shared by all cortexbridge modules."""


class CortexBridgeError(Exception):
    """Base class for every error raised by this package."""


class InvalidMesh(CortexBridgeError, ValueError):
    pass


class DisconnectedRoi(CortexBridgeError):
    pass


class NotADisk(CortexBridgeError):
    pass


class EmptySource(CortexBridgeError, ValueError):
    pass


class SolverFailure(CortexBridgeError):
    pass


class DegenerateFace(CortexBridgeError, ValueError):
    pass


class BijectivityLost(CortexBridgeError):
    pass


class NotBijective(CortexBridgeError):
    pass


class DegenerateInterval(CortexBridgeError, ValueError):
    pass


class ShapeMismatch(CortexBridgeError, ValueError):
    pass


class NumericalDivergence(CortexBridgeError):
    """A training loss became non-finite.

    ``checkpoint`` holds the path of the last good checkpoint, if any.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class FlatSeries(CortexBridgeError, ValueError):
    pass


class ZeroVariance(CortexBridgeError, ValueError):
    pass


class MissingUpstream(CortexBridgeError):
    pass


class ConfigInvalid(CortexBridgeError, ValueError):
    pass


class FormatError(CortexBridgeError, ValueError):
    """A binary or text artifact does not match its documented layout."""
