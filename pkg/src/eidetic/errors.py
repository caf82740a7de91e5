"""Exception hierarchy shared by every module.

``ValidationError`` subclasses mark bad user input (CLI exit code 1); anything
else escaping the CLI is treated as an internal error (exit code 2).
"""


class EideticError(Exception):
    pass


class ValidationError(EideticError, ValueError):
    pass


class ShapeError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class FormatError(ValidationError):
    pass


class PartitionError(ValidationError):
    pass


class CollectiveError(EideticError):
    pass


class GraphError(EideticError):
    """Misuse of the autograd graph (non-scalar seed, reuse after release)."""


class TrainingError(EideticError):
    pass
