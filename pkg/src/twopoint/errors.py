"""Exception types shared across the package."""


class TwoPointError(Exception):
    """Base class for all estimation and configuration errors."""


class InsufficientLocalData(TwoPointError):
    """A local fit had fewer than d+1 usable points (widen the bandwidth)."""


class EmptyNeighborhood(TwoPointError):
    """No kernel mass at the evaluation point."""


class AllCandidatesFailed(TwoPointError):
    """Every candidate bandwidth failed the leave-one-out evaluation."""

    def __init__(self, failed):
        self.failed = list(failed)
        super().__init__(f"all candidate bandwidths failed: {self.failed}")


class InvalidPropensity(TwoPointError):
    """Propensity outside the open interval (0, 1)."""


class ZeroDensity(TwoPointError):
    """Covariate density estimate is zero at the evaluation point."""


class ZeroDelta(TwoPointError):
    """Interior-regime variance requested with a non-positive squared bias."""


class DegenerateVariance(TwoPointError):
    """Conditional outcome variance too close to zero to standardize residuals."""


class DegenerateGap(TwoPointError):
    """Variance-gap root non-positive; the closed-form variance is undefined."""


class ArmTooSmall(TwoPointError):
    """A treatment arm has fewer than two observations."""


class TooFewPoints(TwoPointError):
    """Too many per-point failures for a reliable sample average."""


class UnsupportedDim(TwoPointError):
    """Covariate dimension not supported by the requested simulation model."""


class ParseError(TwoPointError):
    """A data file cell could not be parsed."""

    def __init__(self, row, column, reason):
        self.row = row
        self.column = column
        self.reason = reason
        super().__init__(f"row {row}, column {column!r}: {reason}")


class SchemaError(TwoPointError):
    """A data file violates the required column schema."""


class ConfigError(TwoPointError):
    """A configuration key is unknown or out of range."""

    def __init__(self, key, reason=""):
        self.key = key
        msg = f"config key {key!r}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
