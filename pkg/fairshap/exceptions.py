class BaseException(Exception):
    """Base class to all exceptions produced in the lib"""
    pass


class DataFileError(BaseException):
    """Raised when a raw data file is missing or cannot be opened"""
    pass


class RowParseError(BaseException):
    """Raised when a raw data row cannot be parsed, carries the 1-based row number"""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class EmptySplitError(BaseException):
    """Raised when a split holds no rows after cleaning or selection"""
    pass


class EmptyCellError(BaseException):
    """Raised when a conditioning cell misses one of the protected groups"""

    def __init__(self, message, cells=()):
        super().__init__(message)
        self.cells = tuple(cells)


class DimensionMismatchError(BaseException):
    """Raised when an input does not have the width a model was built for"""
    pass


class NonFiniteError(BaseException):
    """Raised when an activation, gradient or parameter is not finite"""
    pass


class DivergenceError(NonFiniteError):
    """Raised when a training loss or update becomes non-finite"""
    pass


class InvalidProbabilityError(BaseException):
    """Raised when a vector is not a valid point of the probability simplex"""
    pass


class UnknownPlayerError(BaseException):
    """Raised when a coalition references a player that does not exist"""
    pass


class MissingSideInfoError(BaseException):
    """Raised when a value function needs a side information field that was not given"""
    pass


class PlayerCapExceededError(BaseException):
    """Raised when exact enumeration is requested for too many players"""
    pass


class EstimatorConfigError(BaseException):
    """Raised when estimator settings are out of range"""
    pass


class DegenerateDistributionError(BaseException):
    """Raised when a group score distribution is constant"""
    pass


class UnresolvedReferenceError(BaseException):
    """Raised when a configuration points at an artifact that does not exist"""
    pass


class StageError(BaseException):
    """Raised when a pipeline stage fails, carries the stage name"""

    def __init__(self, stage, cause):
        super().__init__("Stage %s failed: %s" % (stage, cause))
        self.stage = stage
        self.cause = cause


class TrainConfigError(BaseException):
    """Raised when training settings are out of range"""
    pass
