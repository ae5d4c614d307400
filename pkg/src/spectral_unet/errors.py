"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are inconsistent with an operation's contract."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class HD95Undefined(ValueError):
    """HD95 requested for a class absent from one of the masks."""
