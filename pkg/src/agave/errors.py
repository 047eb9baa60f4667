"""Exception hierarchy shared by every module of the package."""


class AgaveError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(AgaveError, ValueError):
    pass


class DomainError(AgaveError, ValueError):
    pass


class NotScalar(AgaveError, ValueError):
    pass


class EvenKernel(AgaveError, ValueError):
    pass


class NonFiniteGradient(AgaveError, FloatingPointError):
    pass


class NonFiniteLoss(AgaveError, FloatingPointError):
    pass


class IndivisibleExtents(AgaveError, ValueError):
    pass


class TruncatedFile(AgaveError, ValueError):
    pass


class LabelOutOfRange(AgaveError, ValueError):
    pass


class BadMagic(AgaveError, ValueError):
    pass


class ShapeTableMismatch(AgaveError, ValueError):
    pass


class ConfigError(AgaveError, ValueError):
    pass
