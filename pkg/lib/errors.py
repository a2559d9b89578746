"""Exception and warning types shared across the pipeline."""


class CountyLexError(ValueError):
    """Base class for all pipeline errors."""


class MalformedRecord(CountyLexError):
    """Raw line could not be parsed into a record."""


class MissingRequiredField(CountyLexError):
    """Record lacks id, user_id or text."""


class SchemaError(CountyLexError):
    """Tabular input or spec file does not follow its documented schema."""


class DuplicateConflict(CountyLexError):
    """Same gazetteer key mapped to two different FIPS codes."""


class ConfigMismatch(CountyLexError):
    """Accumulators built with different configurations cannot be merged."""


class EmptyCounty(CountyLexError):
    """No county has data left to build a feature row from."""


class NegativeWeight(CountyLexError):
    """Topic model row with a negative weight."""


class NonPositiveUnderLog(CountyLexError):
    """Outcome value <= 0 with a log transform requested."""


class AllColumnsDropped(CountyLexError):
    """Variance filter removed every column."""


class NonFinite(CountyLexError):
    """NaN or infinite value passed to a numerical routine."""


class TooFewRows(CountyLexError):
    """Fewer rows than cross-validation folds."""


class ConstantVector(CountyLexError):
    """Pearson correlation is undefined for a constant vector."""


class ExperimentCellError(CountyLexError):
    """A module error raised inside one experiment grid cell."""

    def __init__(self, cell: str, cause: Exception):
        super().__init__(f"[{cell}] {type(cause).__name__}: {cause}")
        self.cell = cell
        self.cause = cause


class RankDeficientWarning(UserWarning):
    """Requested more principal components than the data rank supports."""


class EmptyCountyWarning(UserWarning):
    """A county had no tweets/tokens/users and was dropped."""


class DuplicateRowWarning(UserWarning):
    """Repeated key in a tabular input; last row wins."""
