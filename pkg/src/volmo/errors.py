"""Exception types raised across the toolkit.

Grouped here so callers (and the CLI exit-code mapping) can catch by
category: ``InputError`` covers bad data or configuration, while
``ExternalServiceError`` covers unreachable or misbehaving providers.
"""


class VolmoError(Exception):
    """Base class for all toolkit errors."""


class InputError(VolmoError):
    """Invalid input data, labels, or configuration."""


class ExternalServiceError(VolmoError):
    """A remote provider failed or is unreachable."""


# --- corpus parsing ---------------------------------------------------------

class MalformedXml(InputError):
    """Document is not well-formed XML."""


class NotJats(InputError):
    """XML root element is not a journal ``article``."""


# --- caption revision -------------------------------------------------------

class EmptyCaption(InputError):
    """Caption is empty after whitespace trimming."""


class EmptyResponse(InputError):
    """Provider response contains no usable text."""


class ProviderUnreachable(ExternalServiceError):
    """Chat-completion endpoint could not be reached."""


class AllAttemptsRejected(ExternalServiceError):
    """Every revision attempt failed validation and no fallback applied."""


# --- instruction schema -----------------------------------------------------

class UnknownCondition(InputError):
    """Condition name is outside the canonical vocabulary."""


class UnsupportedDisease(InputError):
    """No staging template exists for this disease."""


class LabelOutOfRange(InputError):
    """Label value is not valid under the dataset's label schema."""


class MissingImageRef(InputError):
    """Source record carries no image reference."""


# --- case dialogue ----------------------------------------------------------

class InvalidProfile(InputError):
    """Clinical profile violates a schema invariant."""


# --- text metrics -----------------------------------------------------------

class UnknownPolicy(InputError):
    """Tokenization policy id is not registered."""


class EmptyCandidate(InputError):
    """Candidate token sequence is empty."""


class EmptySequence(InputError):
    """A token sequence required to be non-empty is empty."""


class EmptyMatrix(InputError):
    """Token embedding matrix has no rows."""


class DimMismatch(InputError):
    """Embedding dimensions differ between the two sides."""


class ZeroVector(InputError):
    """Sentence embedding has zero norm."""


# --- classification metrics / stats -----------------------------------------

class LengthMismatch(InputError):
    """Paired lists have different lengths."""


class EmptyInput(InputError):
    """Operation requires at least one element."""


class InsufficientPairs(InputError):
    """Too few non-zero differences for a signed-rank test."""


class ConfigMismatch(InputError):
    """Bootstrap summaries being compared were produced under different configs."""


# --- train manifest ---------------------------------------------------------

class UnparseableDocument(InputError):
    """Training-config document could not be parsed."""
