"""Exception hierarchy shared by every linattn module."""


class LinAttnError(Exception):
    """Base class for all errors raised by linattn."""


class InvalidShape(LinAttnError, ValueError):
    pass


class ShapeMismatch(LinAttnError, ValueError):
    pass


class NonFiniteInput(LinAttnError, ValueError):
    pass


class InvalidPlan(LinAttnError, ValueError):
    pass


class InvalidPhase(LinAttnError, ValueError):
    pass


class MissingForwardState(LinAttnError, ValueError):
    pass


class MeasurementNested(LinAttnError, RuntimeError):
    pass


class InsufficientData(LinAttnError, ValueError):
    pass


class DegenerateDenominator(LinAttnError, ArithmeticError):
    """A normalizer ``g_i`` fell below the precision-dependent threshold."""

    def __init__(self, group, index, value):
        self.group = group
        self.index = index
        self.value = value
        super().__init__(
            f"degenerate denominator at group {group}, row {index}: |g| = {abs(value):.3e}"
        )
