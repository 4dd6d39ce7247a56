"""Exception types raised across the library."""


class SsmseqError(Exception):
    """Base class for all library errors."""


# --- ssm_core ---

class InvalidStep(SsmseqError):
    """Discretization step size is not a positive real."""


class SingularDiscretization(SsmseqError):
    """The bilinear resolvent (I - delta/2 A) is numerically singular."""


class DimensionMismatch(SsmseqError):
    """State or input dimensions do not match the system."""


class Overflow(SsmseqError):
    """A computed sequence left the representable range (unstable system)."""


# --- s4_kernel ---

class InvalidDimension(SsmseqError):
    """State dimension must be an even integer >= 2."""


class EigenFailure(SsmseqError):
    """The symmetric eigen-solve did not converge."""


class InvalidRange(SsmseqError):
    """A (min, max) range argument is empty or non-positive."""


class ResonanceFailure(SsmseqError):
    """A pole of the state matrix fell on the frequency evaluation grid."""


class PoleError(SsmseqError):
    """A Cauchy-sum denominator is too close to zero."""


# --- nn_layers ---

class ShapeMismatch(SsmseqError):
    """Array shape does not match the layer contract."""


class EmptyMask(SsmseqError):
    """A time mask with no valid positions was supplied."""


class CheckpointError(SsmseqError):
    """A checkpoint file is malformed or version-incompatible."""


# --- training ---

class InvalidLabel(SsmseqError):
    """Class label outside the logits range."""


class DegenerateSplit(SsmseqError):
    """Train/validation split overlaps or misses a class."""


class EmptyDataset(SsmseqError):
    """An operation requiring samples received none."""


class InsufficientData(SsmseqError):
    """Dataset too small for the requested protocol."""


# --- data_io ---

class MissingFile(SsmseqError):
    """A manifest entry points at a file that does not exist."""


class InconsistentRoiCount(SsmseqError):
    """A timeseries file disagrees with the dataset channel count."""


class BadHeader(SsmseqError):
    """Manifest header differs from 'id,path,label'."""


class ParseError(SsmseqError):
    """A CSV cell could not be parsed; carries row/column location."""

    def __init__(self, message: str, row: int | None = None, col: int | None = None):
        super().__init__(message)
        self.row = row
        self.col = col


class NonFiniteValue(ParseError):
    """A timeseries cell holds NaN or infinity."""


class InvalidSpan(SsmseqError):
    """Requested token span does not fit the sequence length."""


class InsufficientClassMembers(SsmseqError):
    """A class has fewer members than the number of folds."""
