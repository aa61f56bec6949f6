"""Exception hierarchy shared by every ucmf module."""


class UCMFError(Exception):
    """Base class for all errors raised by ucmf."""


class GraphError(UCMFError):
    pass


class SelfLoopError(GraphError):
    pass


class RangeError(GraphError):
    pass


class IsolatedNodeError(GraphError):
    pass


class ShapeError(UCMFError):
    pass


class MissingLabelError(UCMFError):
    pass


class DegenerateNormError(UCMFError):
    """A vector was too close to zero to be projected onto the unit sphere."""


class DivergenceError(UCMFError):
    """Training produced a non-finite or exploding loss."""


class NonConvergence(UCMFError):
    pass


class EmptySplitError(UCMFError):
    pass


class StallError(UCMFError):
    """A simulated worker missed the round barrier."""
