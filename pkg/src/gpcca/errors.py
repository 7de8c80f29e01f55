"""Exception hierarchy shared across the package."""


class GpccaError(Exception):
    """Base class for all errors raised by this package."""


class DataError(GpccaError):
    """Invalid input data: shapes, masks, non-finite values, file contents."""


class NumericalError(GpccaError):
    """Numerical failure during model estimation."""


class DegenerateCovarianceError(NumericalError):
    """A covariance block is not symmetric positive definite."""


class SingularMomentError(NumericalError):
    """Accumulated latent second moments are singular (latent dimension too
    large or posterior collapsed)."""
