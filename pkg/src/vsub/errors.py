"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so raising the right class is
part of the public contract: ParseError -> 2, ValidationError -> 3,
NumericError -> 4, plain OSError -> 5.
"""


class VsubError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(VsubError):
    """Malformed input text: mesh files, batch scripts, config files."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:"
            if line is not None:
                prefix += f"{line}:"
            prefix += " "
        super().__init__(prefix + message)


class ValidationError(VsubError):
    """Inputs are well-formed but violate a documented precondition."""


class NumericError(VsubError):
    """A numerical routine failed: singular system, rank deficiency,
    conditioning cap exceeded, violated hypothesis of a bound."""
