"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class TagretError(Exception):
    exit_code = 1


class ConfigError(TagretError, ValueError):
    exit_code = 2


class CapacityError(ConfigError):
    """Attribute vocabulary cannot supply the requested number of unique identities."""


class ShapeError(TagretError, ValueError):
    exit_code = 2


class InputError(TagretError, ValueError):
    exit_code = 3


class DataError(TagretError):
    exit_code = 3


class ChecksumError(DataError):
    pass


class NumericError(TagretError, ArithmeticError):
    exit_code = 4
