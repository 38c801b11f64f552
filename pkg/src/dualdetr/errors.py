"""Exception hierarchy. Each class carries a short category used by the CLI."""


class DualDetrError(Exception):
    category = "error"


class ConfigError(DualDetrError, ValueError):
    category = "config"


class EmptyInputError(DualDetrError, ValueError):
    category = "input"


class FormatError(DualDetrError, ValueError):
    category = "format"


class MatchingError(DualDetrError, ValueError):
    category = "matching"


class NumericalError(DualDetrError, ArithmeticError):
    category = "numerical"


class TrainingError(DualDetrError, RuntimeError):
    category = "training"
