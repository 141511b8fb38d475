"""Exception hierarchy for stratified-experiment analysis."""


class StratAdjError(Exception):
    """Base class for all package errors."""


class InputError(StratAdjError):
    """Invalid external input (CSV rows, config files, flag values)."""


class EmptyStratumArm(InputError):
    """A stratum has no treated or no control units."""


class DimensionMismatch(InputError):
    """Covariate rows disagree on dimension."""


class NonFinite(InputError):
    """An outcome or covariate value is NaN or infinite."""


class InvalidAlpha(InputError):
    """Confidence level outside (0, 1)."""


class DegenerateVariance(StratAdjError):
    """A variance-based diagnostic has a zero denominator."""


class TooLarge(StratAdjError):
    """Assignment space exceeds the enumeration cap."""


class RankDeficient(StratAdjError):
    """Regressor matrix is not full rank.

    ``columns`` holds the indices of the dependent columns detected by the
    pivoted decomposition.
    """

    def __init__(self, message: str, columns: tuple[int, ...] = ()):
        super().__init__(message)
        self.columns = tuple(columns)


class ArmTooSmall(StratAdjError):
    """A stratum arm has too few units for the requested fit."""


class VarianceUndefined(StratAdjError):
    """A variance estimator needs at least two units per arm in every stratum."""


class SingularCovariance(StratAdjError):
    """A population covariance matrix is numerically singular."""


class MethodInapplicable(StratAdjError):
    """No requested estimation method can run on this design."""
