"""
Error types raised across the package.
The CLI maps each class to its own exit code (see hsvlt.main).
"""


class HsvltError(Exception):
    """Base class for every error raised on purpose by hsvlt"""
    exit_code = 1


class ShapeError(HsvltError, ValueError):
    """Tensor shapes do not satisfy an operation's contract"""
    exit_code = 3


class ConfigError(HsvltError, ValueError):
    """Invalid or inconsistent configuration"""
    exit_code = 2


class ContainerError(HsvltError):
    """Malformed tensor container or checkpoint archive"""
    exit_code = 4


class NonNegativeError(HsvltError, ValueError):
    """A non-negative factorization received negative entries"""


class LabelError(HsvltError, ValueError):
    """Truth matrix holds something other than 0 and 1"""


class NoPositiveLabelsError(HsvltError, ValueError):
    """Average precision requested for a class with no positives"""


class DivergenceError(HsvltError):
    """Training produced a non-finite loss"""
    exit_code = 5


class GradientCheckError(HsvltError):
    """Analytic gradients disagree with finite differences"""
    exit_code = 6
