"""Exception types shared across the package.

Every error a caller is expected to handle maps to one of these classes;
the CLI translates them into exit codes.
"""


class CrepaError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(CrepaError, ValueError):
    """Array/tensor shapes do not satisfy an operation's contract."""


class DomainError(CrepaError, ValueError):
    """A scalar argument lies outside its permitted range."""


class ConfigError(CrepaError, ValueError):
    """A configuration value or target name is invalid."""


class NumericError(CrepaError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class IntegrityError(CrepaError, RuntimeError):
    """Weights that must stay frozen were mutated."""


class ComparisonInvalidError(CrepaError, ValueError):
    """Runs being compared were produced under incompatible configs."""


class DegenerateInputError(CrepaError, ValueError):
    """Input is degenerate for the requested statistic (e.g. zero self-HSIC)."""


class TrainingFailureError(CrepaError, RuntimeError):
    """A training procedure failed to reach its required quality bar."""
