"""Exception and warning types raised across the package."""


class InputError(ValueError):
    """Malformed user input: bad files, invalid parameters, unknown names."""


class NumericalError(ArithmeticError):
    """A computation produced an impossible or non-finite result."""


class ZeroEvidenceError(NumericalError):
    """The evidence has probability zero under the current model."""


class ParticleDegeneracyError(NumericalError):
    """Every particle received zero weight within a span."""


class JointSizeError(InputError):
    """Amalgamating a CTBN would exceed the joint state-space cap."""


class NotConvergedWarning(UserWarning):
    """EM hit its iteration cap before the tolerance was reached."""
