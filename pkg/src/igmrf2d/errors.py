"""Exception hierarchy; CLI exit codes hang off the two base classes."""


class ValidationError(ValueError):
    """Bad input: shape, range, schema or configuration."""


class NumericalError(ArithmeticError):
    """A factorization or density evaluation broke down."""


class InvalidDimensionError(ValidationError):
    pass


class InvalidIndexError(ValidationError):
    pass


class ImproperDistributionError(ValidationError):
    pass


class ConstraintDegeneracyError(NumericalError):
    pass


class MappingError(ValidationError):
    pass


class ConfigurationError(ValidationError):
    pass
