"""Exception types shared across the package."""


class DeryError(Exception):
    """Base class for every error raised by this package."""


class ManifestParseError(DeryError):
    """The manifest file is not well-formed JSON or misses required keys."""


class ManifestConsistencyError(DeryError):
    """The manifest parsed but violates a zoo invariant (names the offender)."""


class MalformedCutsError(DeryError):
    """Cut ordinals are non-monotone, out of range, or otherwise unusable."""


class DegenerateSimilarityError(DeryError):
    """A centered feature matrix has (numerically) zero Frobenius norm."""


class MissingTableEntryError(DeryError):
    """A similarity lookup referenced a model or boundary not in the table."""


class DegenerateClusteringError(DeryError):
    """An equivalence set became empty; the current restart must be abandoned."""


class InfeasiblePartitionError(DeryError):
    """No valid K-way cut exists for some model under the size bound."""


class UnscorableCandidateError(DeryError):
    """A candidate block lacks the binary-code files needed for scoring."""


class InstanceTooLargeError(DeryError):
    """Exhaustive enumeration would exceed the configuration guard."""
