"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`LvhgError`.
The ``exit_code`` attribute is what the command line returns when the error
escapes a subcommand.
"""


class LvhgError(Exception):
    exit_code = 3


class ValidationError(LvhgError):
    """Input violates a modelling assumption or a structural contract."""

    exit_code = 2


class NumericalError(LvhgError):
    exit_code = 3


class ConfigError(ValidationError):
    pass


class InvalidStabilityIndex(ValidationError):
    pass


class DegenerateSpectralMeasure(ValidationError):
    pass


class AsymmetricMeasure(ValidationError):
    pass


class SingularMatrix(ValidationError):
    pass


class SingularSigma(ValidationError):
    pass


class NumericOverflow(NumericalError):
    pass


class HorizonTooShort(ValidationError):
    pass


class EnsembleFailure(NumericalError):
    """More than the tolerated fraction of paths in an ensemble failed."""


class NonStationary(NumericalError):
    pass


class ReducibleChainEstimate(NumericalError):
    pass


class InsufficientDecaySignal(NumericalError):
    pass


class QuadratureUnderResolved(NumericalError):
    pass


class NotCentered(ValidationError):
    pass


class SolverDivergence(NumericalError):
    pass


class QuadratureFailure(NumericalError):
    pass


class WindowEmpty(NumericalError):
    pass
