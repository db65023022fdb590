class LatentMatchError(Exception):
    """Base class for package errors."""


class InvalidDimensionError(LatentMatchError, ValueError):
    pass


class InvalidParameterError(LatentMatchError, ValueError):
    pass


class InvalidInputError(LatentMatchError, ValueError):
    pass


class InfeasibleConstraintsError(LatentMatchError, ValueError):
    """The shape-constraint set is empty."""


class DegenerateSampleError(LatentMatchError, ValueError):
    pass


class CollinearityError(LatentMatchError, ValueError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)
