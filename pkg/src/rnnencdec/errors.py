"""Exception types raised across the package."""


class RnnEncDecError(Exception):
    """Base class for all package errors."""


class ShapeError(RnnEncDecError, ValueError):
    pass


class ParameterError(RnnEncDecError, ValueError):
    pass


class VocabularyError(RnnEncDecError, IndexError):
    pass


class InputContractError(RnnEncDecError, ValueError):
    """A sequence violates the EOS-termination or non-emptiness contract."""


class FormatError(RnnEncDecError):
    """Checkpoint or vocabulary file is corrupt or incompatible."""


class ParseError(RnnEncDecError, ValueError):
    def __init__(self, message, line_no=None, path=None):
        self.line_no = line_no
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line_no is not None:
            where += f"line {line_no}: "
        elif where:
            where += " "
        super().__init__(where + message)


class NumericError(RnnEncDecError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""
