class FspLidarError(Exception):
    pass


class InvalidParameterError(FspLidarError, ValueError):
    pass


class StateError(FspLidarError):
    """An operation received a frame in the wrong coordinate stage."""


class DegenerateGeometryError(FspLidarError, ValueError):
    pass


class InsufficientDataError(FspLidarError, ValueError):
    pass


class NumericalError(FspLidarError, ArithmeticError):
    pass
