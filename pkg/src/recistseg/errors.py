"""Exception types shared across the package.

Everything raised because of bad *input data* derives from :class:`DataError`
so the command line can map it to its data-error exit code.
"""


class DataError(ValueError):
    """Input data is malformed or inconsistent."""


class FormatError(DataError):
    """A file on disk does not match its header or schema."""


class AnnotationError(DataError):
    """A RECIST annotation is geometrically invalid."""


class FallbackRequired(RuntimeError):
    """The appearance model produced nothing usable; use RECIST-only labels."""
