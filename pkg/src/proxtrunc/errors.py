"""Exception hierarchy.

Fatal conditions raise; recoverable numerical conditions are reported as
string flags on the returned object instead (see ``FLAG_*`` constants).
"""


class ProxTruncError(Exception):
    """Base class for all package errors."""


class DataError(ProxTruncError):
    """Problems with input data or its schema."""


class MissingColumn(DataError):
    def __init__(self, column):
        super().__init__(f"column {column!r} not found in CSV header")
        self.column = column


class NonNumericCell(DataError):
    def __init__(self, row, column, value):
        super().__init__(f"row {row}: non-numeric value {value!r} in column {column!r}")
        self.row = row
        self.column = column


class ViolatesQltX(DataError):
    def __init__(self, row, q, x):
        super().__init__(f"row {row}: entry time q={q} is not strictly below follow-up x={x}")
        self.row = row


class DegenerateRegressor(DataError):
    pass


class DimensionMismatch(ProxTruncError, ValueError):
    pass


class NonFiniteInput(ProxTruncError, ValueError):
    pass


class EstimationError(ProxTruncError):
    """An estimator could not produce a value."""


class AllWeightsZero(EstimationError):
    pass


class ZeroDenominator(EstimationError):
    pass


class NoComparablePairs(EstimationError):
    pass


class TooManyFailures(EstimationError):
    pass


class SingularProxyLaw(ProxTruncError):
    pass


# non-fatal flags
FLAG_EMPTY_RISK_SET = "empty_risk_set"
FLAG_CENSOR_FLOOR = "censor_weight_floor_hit"
FLAG_EXP_CLAMP = "linear_predictor_clamped"
FLAG_RANK_DEFICIENT = "rank_deficient_update"
FLAG_CDF_CLAMP = "cdf_clamped"
FLAG_CDF_ABOVE_ONE = "cdf_above_one"
FLAG_CURVE_UNDEFINED = "curve_undefined_at_t0"
