"""Exception types shared across the package."""


class BiofuseError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(BiofuseError):
    """Input data or configuration violates a documented invariant."""


class ConfigError(ValidationError):
    """Run configuration file is malformed or inconsistent."""


class CorpusFormatError(BiofuseError):
    """Corpus file could not be parsed; the message names the line or record."""


class CorpusVersionError(CorpusFormatError):
    """Corpus file carries an unsupported format version."""


class DatasetFormatError(BiofuseError):
    """Preprocessed dataset file is malformed or truncated."""


class ModelFormatError(BiofuseError):
    """Model file is malformed, truncated, or has the wrong version."""


class TemplateFormatError(BiofuseError):
    """Template store file is malformed or has the wrong version."""


class WindowOutOfRange(BiofuseError):
    """Requested event window extends beyond the recorded stream."""


class DegenerateWindow(BiofuseError):
    """Window holds fewer than two rows and cannot be resampled."""


class FitError(BiofuseError):
    """A fitted transform (standardizer, score normalizer) is degenerate."""


class ShapeError(BiofuseError):
    """Input shape does not match the model architecture."""


class MiningError(BiofuseError):
    """Batch composition admits no valid triplets."""


class DivergenceError(BiofuseError):
    """Training produced non-finite weights; the message names the step."""


class IdentityError(BiofuseError):
    """Lookup of an identity that is not enrolled / not covered by a threshold."""


class CalibrationError(BiofuseError):
    """Threshold calibration lacks genuine or impostor scores for an identity."""


class ContractError(BiofuseError):
    """A value passed between stages violates its range contract."""


class EvalError(BiofuseError):
    """Evaluation cannot proceed (empty trial sets, bad fold plan, ...)."""
