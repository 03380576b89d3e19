"""Exception types shared across the package."""


class PopSynthError(Exception):
    """Base class for all errors raised by popsynth."""


class ParseError(PopSynthError, ValueError):
    """Input text could not be parsed.

    ``source`` and ``line`` locate the problem when known; both end up in
    the message so the CLI can print it verbatim.
    """

    def __init__(self, message, source=None, line=None):
        self.source = source
        self.line = line
        where = ""
        if source is not None:
            where = f"{source}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class FormatError(ParseError):
    """Input parsed but violates a structural rule (ragged, negative, missing cells)."""


class SchemaError(PopSynthError, ValueError):
    pass


class GeoError(PopSynthError, ValueError):
    pass


class DimensionError(PopSynthError, ValueError):
    pass


class GuardError(PopSynthError, ValueError):
    """Instance too large for exhaustive enumeration."""


class DegenerateError(PopSynthError, ArithmeticError):
    """A correlation is undefined because an input vector is constant."""
