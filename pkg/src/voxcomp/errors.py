"""Exception hierarchy shared across the package."""


class VoxcompError(Exception):
    """Base class for all voxcomp errors."""


# --- volume I/O ---

class CorruptHeader(VoxcompError):
    """File header failed magic/size/sanity checks."""


class UnsupportedDatatype(VoxcompError):
    """On-disk datatype is outside the supported set."""


class DimensionMismatch(VoxcompError):
    """Array dimensionality or shape disagrees with what the operation needs."""


class EmptyMask(VoxcompError):
    """A mask selects no voxels."""


# --- decomposition ---

class RankDeficient(VoxcompError):
    """Data covariance has fewer usable directions than requested components."""


class LengthMismatch(VoxcompError):
    """Time-axis lengths disagree."""


class KMismatch(VoxcompError):
    """Component counts disagree."""


# --- model / training ---

class ShapeMismatch(VoxcompError):
    """Tensor shapes disagree."""


class TooSmall(VoxcompError):
    """Input is too small for the requested window or operation."""


class NonFiniteLoss(VoxcompError):
    """Training loss became NaN or Inf."""


# --- codec ---

class NonFiniteInput(VoxcompError):
    """Values to quantize contain NaN or Inf."""


class CorruptStream(VoxcompError):
    """Entropy-coded bitstream cannot be decoded."""


class ChecksumMismatch(VoxcompError):
    """Artifact payload does not match its checksum."""


class VersionUnsupported(VoxcompError):
    """Artifact was written by an unknown format version."""


# --- evaluation ---

class SingularDesign(VoxcompError):
    """Regression design matrix is rank deficient."""


class EmptyRegion(VoxcompError):
    """An atlas region contains no voxels."""


class TooFewSamples(VoxcompError):
    """Not enough labeled samples for cross-validation."""


class ConfigError(VoxcompError):
    """Configuration file is invalid."""
