"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: usage problems -> 1,
data/contract problems -> 2, numerical problems -> 3.
"""


class DhoiError(Exception):
    """Base class for all package errors."""


class DimensionError(DhoiError):
    """Shape or stride does not satisfy an operation's contract."""


class InputError(DhoiError):
    """Input values are malformed (non-finite, empty, degenerate)."""


class RangeError(DhoiError):
    """A scalar argument is outside its allowed range."""


class NameLookupError(DhoiError):
    """A requested action/object/class name is unknown."""


class ContractError(DhoiError):
    """Caller violated a documented precondition."""


class SamplingError(DhoiError):
    """A sample pool lacks a required category."""


class NumericalError(DhoiError):
    """A computation produced a non-finite value."""


class NormalizationError(DhoiError):
    """A vector with zero norm cannot be normalized."""


class ExtractionError(DhoiError):
    """Box extraction failed (e.g. an all-zero probability map)."""


class StateError(DhoiError):
    """Operation requires state (weights, checkpoints) that is missing."""


class SchemaError(DhoiError):
    """A data file does not validate against its schema.

    ``path`` is a JSON-pointer-ish locator of the offending element.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")
