"""Exception hierarchy.

Validation problems derive from :class:`ValidationError` (CLI exit code 2);
numerical aborts derive from :class:`NumericalError` (exit code 3).
"""


class GravityDBError(Exception):
    pass


class ValidationError(GravityDBError, ValueError):
    pass


class NumericalError(GravityDBError, ArithmeticError):
    pass


class EmptyGeometry(ValidationError):
    pass


class NonFiniteCoordinate(ValidationError):
    pass


class InvalidFaceIndex(ValidationError):
    pass


class InvalidNormals(ValidationError):
    pass


class NotWatertight(ValidationError):
    pass


class CountMismatch(ValidationError):
    pass


class DegenerateConfiguration(ValidationError):
    pass


class MissingNormals(ValidationError):
    pass


class NoJointLabels(ValidationError):
    pass


class InvalidDims(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class SchemaError(ValidationError):
    pass


class MissingFile(ValidationError, FileNotFoundError):
    pass


class ConfigError(ValidationError):
    pass


class NonFiniteUpdate(NumericalError):
    pass
