"""Exception hierarchy shared by the codec, container and CLI."""


class BirkhoffError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(BirkhoffError, ValueError):
    """Invalid hyperparameter or codec configuration."""


class RejectedInputError(BirkhoffError, ValueError):
    """Input tensor or file that the codec refuses to process."""


class CorruptDataError(BirkhoffError):
    """Encoded data is inconsistent with its metadata."""


class SearchError(BirkhoffError):
    """Every candidate of a hyperparameter search failed."""
