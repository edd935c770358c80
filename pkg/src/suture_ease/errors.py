"""Exception hierarchy shared across the package.

Every error carries an ``exit_code`` so the CLI can map failure classes to
process exit statuses without inspecting messages.
"""


class EaseError(Exception):
    exit_code = 1
    code = "error"

    def __init__(self, message, **context):
        super().__init__(message)
        self.message = message
        self.context = context


class ContractError(EaseError, ValueError):
    """Precondition violated by the caller."""

    exit_code = 2
    code = "contract"


class ConfigError(ContractError):
    code = "config"


class DimensionError(ContractError):
    code = "dimension"


class GeometryError(ContractError):
    code = "geometry"


class RoutingError(ContractError):
    code = "routing"


class DataError(EaseError):
    exit_code = 3
    code = "data"


class FormatError(DataError):
    """Malformed clip or checkpoint file. ``offset`` is the byte position."""

    code = "format"

    def __init__(self, message, offset=None, **context):
        super().__init__(message, offset=offset, **context)
        self.offset = offset


class CompatibilityError(DataError):
    code = "compatibility"


class DegenerateInputError(DataError):
    code = "degenerate_input"


class DivergenceError(EaseError):
    exit_code = 4
    code = "divergence"


class TapeError(EaseError, RuntimeError):
    code = "tape"
