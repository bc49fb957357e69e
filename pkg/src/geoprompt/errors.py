"""Exception types shared across the package.

Every failure mode that callers are expected to handle gets its own class so
tests and CLI error reporting can match on type rather than message text.
"""


class GeopromptError(Exception):
    """Base class for all package-specific errors."""


class NearZeroNormError(GeopromptError):
    """A vector whose norm is too small to normalize or compare safely."""


class DimensionMismatchError(GeopromptError):
    """Vectors or matrices with incompatible dimensions."""


class EmptyListError(GeopromptError):
    """An aggregate operation received an empty collection."""


class BadTokenIdError(GeopromptError):
    """A hard token id outside the encoder's vocabulary."""


class ParseError(GeopromptError):
    """Malformed input file; carries a line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"{message} (line {line})" if line is not None else message)


class DuplicateIdError(GeopromptError):
    """Two store entries share an id."""


class EmptyFieldError(GeopromptError):
    """A required string field was empty."""


class NoDescriptorsFoundError(GeopromptError):
    """An LLM completion contained no parseable descriptor bullets."""


class NetworkError(GeopromptError):
    """Transport failure after exhausting the retry budget."""


class MissingDescriptorsError(GeopromptError):
    """No descriptor list exists for the requested (class, geography) pair."""


class MissingGeographyError(GeopromptError):
    """A geography-conditioned strategy was invoked without a geography."""


class SpecInvariantViolatedError(GeopromptError):
    """A PromptSpec whose fields are inconsistent with its strategy."""


class EmptyInputError(GeopromptError):
    """Tokenizer received an empty string."""


class EmptyClassTokensError(GeopromptError):
    """A class name produced no hard tokens."""


class MissingTargetError(GeopromptError):
    """Knowledge targets do not cover a class being trained."""


class NonFiniteLossError(GeopromptError):
    """Training loss became NaN or infinite; aborts with diagnostics."""


class EmptyClassError(GeopromptError):
    """A class has zero samples in the training source split."""


class EmptyEvalSetError(GeopromptError):
    """Evaluation was requested over zero samples."""


class UnknownGroupKeyError(GeopromptError):
    """group_report got a key outside {continent, country, income_bucket}."""


class StructureMismatchError(GeopromptError):
    """Two reports with incompatible shapes were diffed."""


class ZeroVarianceError(GeopromptError):
    """Pearson correlation is undefined for a constant series."""


class TooFewPointsError(GeopromptError):
    """Correlation needs at least three points."""


class ClassSetMismatchError(GeopromptError):
    """Two per-country embedding tables cover different class sets."""


class UnmappedCountryError(GeopromptError):
    """A country in the descriptor set has no continent assignment."""


class DimensionTooSmallError(GeopromptError):
    """Synthetic world dimension cannot host the required orthogonal frame."""


class InsufficientSamplesError(GeopromptError):
    """Split sizes cannot be carved from the available samples."""


class ConfigError(GeopromptError):
    """Run configuration failed schema validation or is inconsistent."""
