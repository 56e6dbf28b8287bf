"""Exception types raised across the library."""


class GrfsqError(Exception):
    """Base class for all library errors."""


class InvalidInput(GrfsqError):
    """Input data is malformed: non-finite values, wrong length, or ragged rows."""


class InvalidCode(GrfsqError):
    """A per-dimension code is outside its level range."""


class InvalidIndex(GrfsqError):
    """A flat codeword index is outside the codebook."""


class TooLarge(GrfsqError):
    """Requested codebook enumeration exceeds the configured cap."""


class InvalidConfig(GrfsqError):
    """A configuration violates a structural invariant."""


class ConfigMismatch(GrfsqError):
    """Data dimensions do not match the quantizer configuration."""


class DegenerateCalibration(GrfsqError):
    """Calibration data has insufficient rank for the requested projection."""


class CorruptStream(GrfsqError):
    """A serialized stream failed validation."""


class PredictorContractViolation(GrfsqError):
    """A predictor returned a grid inconsistent with the generation contract."""
