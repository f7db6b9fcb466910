"""Exception and warning types shared across the package."""


class FkbError(Exception):
    """Base class for all package errors."""

    code = "internal"


class DomainError(FkbError):
    """Input lies outside the modeled domain (e.g. incidence angle too large)."""

    code = "domain"


class DegenerateInput(FkbError):
    """Input is degenerate (zero-length ray, zero-area configuration)."""

    code = "degenerate"


class OutOfDomain(DomainError):
    """A warped point left the modeled field of view."""

    code = "out_of_domain"


class SingularFit(FkbError):
    """Least-squares system is rank deficient or underdetermined."""

    code = "singular_fit"


class FormatError(FkbError):
    """A file does not conform to its declared format."""

    code = "format"


class IoError(FkbError):
    """Filesystem-level failure wrapped with context."""

    code = "io"


class RangeError(FkbError):
    """A numeric parameter is outside its allowed range."""

    code = "range"


class DimensionMismatch(FkbError):
    """Image or field dimensions do not agree."""

    code = "dimension"


class DtypeMismatch(FkbError):
    """Descriptor sets have incompatible dtypes or widths."""

    code = "dtype"


class CountMismatch(FkbError):
    """Keypoint and descriptor files disagree on row count."""

    code = "count"


class EmptyDataset(FkbError):
    """No usable input images were found."""

    code = "empty_dataset"


class EmptyInput(FkbError):
    """An operation requiring at least one element received none."""

    code = "empty_input"


class EmptyLutSet(FkbError):
    """Adaptation was given no warp fields."""

    code = "empty_lut_set"


class InsufficientMatches(FkbError):
    """Too few matches to estimate the requested model."""

    code = "insufficient_matches"


class DegenerateConfiguration(FkbError):
    """All sampled minimal sets were degenerate (e.g. collinear)."""

    code = "degenerate_config"


class DegeneratePoint(FkbError):
    """Projective mapping sent a point to infinity (w ~ 0)."""

    code = "degenerate_point"


class NoMatches(FkbError):
    """Matching correctness is undefined without matches."""

    code = "no_matches"


class MonotonicityWarning(UserWarning):
    """Fitted radial polynomial is not increasing on the sample range."""
