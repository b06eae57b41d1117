"""Exception types shared across the toolkit."""


class NestDrugError(Exception):
    """Base class for all toolkit errors."""


class SmilesSyntaxError(NestDrugError):
    """Malformed SMILES input; carries the offending position."""

    def __init__(self, position: int, reason: str):
        self.position = position
        self.reason = reason
        super().__init__(f"SMILES syntax error at position {position}: {reason}")


class UnsupportedFeatureError(NestDrugError):
    """Valid SMILES construct outside the supported subset."""

    def __init__(self, position: int, feature: str):
        self.position = position
        self.feature = feature
        super().__init__(f"unsupported SMILES feature at position {position}: {feature}")


class ValenceError(NestDrugError):
    """Implicit hydrogen filling produced a negative count."""


class ParameterError(NestDrugError):
    """Argument outside its documented range."""


class ShapeError(NestDrugError):
    """Incompatible array shapes or mismatched fingerprint parameters."""


class DataError(NestDrugError):
    """Non-finite values fed to a checked numeric primitive."""


class NotScalarError(NestDrugError):
    """backward() called on a non-scalar tensor."""


class TapeConsumedError(NestDrugError):
    """backward() called twice through the same graph."""


class MissingGradError(NestDrugError):
    """Optimizer step on a parameter without a populated gradient."""


class EmptyMoleculeError(NestDrugError):
    """Molecular encoder received a graph with no atoms."""


class IdOutOfRangeError(NestDrugError):
    """Context id exceeds its embedding table capacity."""


class UnknownTaskError(NestDrugError):
    """Prediction requested for a task without a head."""


class ConfigError(NestDrugError):
    """Invalid model or training configuration."""


class EmptyDatasetError(NestDrugError):
    """Training or evaluation invoked on an empty dataset."""


class NonFiniteLossError(NestDrugError):
    """Training loss became NaN or infinite; aborted with diagnostics."""


class InsufficientSupportError(NestDrugError):
    """Few-shot adaptation given fewer support rows than requested shots."""


class EmptyBatchError(NestDrugError):
    """Loss computed over zero samples."""


class OneClassOnlyError(NestDrugError):
    """Metric needs both classes present."""


class NoPositivesError(NestDrugError):
    """Metric needs at least one positive label."""


class TooFewSamplesError(NestDrugError):
    """Stratified split needs at least k members per class."""


class MissingYearError(NestDrugError):
    """Temporal split over records without year metadata."""


class ZeroVarianceError(NestDrugError):
    """Degenerate variance in a statistical test (flagged, not always raised)."""


class DegenerateVarianceError(NestDrugError):
    """Regression metrics need nonzero target variance."""


class NotNormalizedError(NestDrugError):
    """Joint probability table does not sum to 1."""


class EmptyDataError(NestDrugError):
    """Forest fitting on an empty design matrix."""


class InsufficientDataError(NestDrugError):
    """Per-target experiment below the configured minimum actives."""


class EmptySetError(NestDrugError):
    """Audit invoked with an empty canonical-form or fingerprint set."""


class EmptyPoolError(NestDrugError):
    """Nearest-neighbor search or campaign over an empty pool."""


class ScorerFailureError(NestDrugError):
    """Campaign scorer raised; wrapped with round context."""


class StepsTooFewError(NestDrugError):
    """Integrated gradients with fewer than 8 steps."""


class ZeroVectorError(NestDrugError):
    """Cosine similarity over an all-zero attribution vector."""


class NonPositiveError(NestDrugError):
    """Concentration must be strictly positive for log conversion."""


class SchemaError(NestDrugError):
    """CSV header does not match the declared schema."""


class IoError(NestDrugError):
    """File could not be read or written."""


class InvariantViolationError(NestDrugError):
    """Internal consistency check failed (maps to CLI exit code 70)."""
