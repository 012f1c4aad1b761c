from pydantic import AfterValidator, BaseModel, model_validator
from typing import Annotated, Any, Dict, List, Optional

REPORT_SCHEMA_VERSION = "1.0"
CURVE_LENGTH = 48


def _check_curve(value: List[float]) -> List[float]:
    if len(value) != CURVE_LENGTH:
        raise ValueError(f"curves must have {CURVE_LENGTH} entries, got {len(value)}")
    return value


Curve = Annotated[List[float], AfterValidator(_check_curve)]


class QuantileCurve(BaseModel):
    quantile: float
    real: Curve
    synthetic: Curve
    mean_relative_error: float


class MmdSummary(BaseModel):
    statistic: float
    p_value: float
    n_permutations: int
    sample_size: int


class PcaSummary(BaseModel):
    explained_variance_ratio: List[float]
    real: List[List[float]]
    synthetic: List[List[float]]


class TstrSummary(BaseModel):
    mae_synthetic_trained: float
    mae_real_trained: float
    ratio: float
    noise_baseline_ratio: float
    skipped_combinations: int = 0

    @model_validator(mode="after")
    def _ratio_matches(self):
        if self.mae_real_trained == 0:
            if self.ratio != float("inf"):
                raise ValueError("ratio must be infinite when the real-trained error is zero")
            return self
        expected = self.mae_synthetic_trained / self.mae_real_trained
        if abs(self.ratio - expected) > 1e-9 * max(1.0, abs(expected)):
            raise ValueError("ratio must equal mae_synthetic_trained / mae_real_trained")
        return self


class ConditionalMeans(BaseModel):
    """Mean daily curves for EV and non-EV households; None where a side is absent or refused."""

    ev_real: Optional[Curve] = None
    non_ev_real: Optional[Curve] = None
    ev_synthetic: Optional[Curve] = None
    non_ev_synthetic: Optional[Curve] = None


class AuditEntry(BaseModel):
    labels: Dict[str, Any]
    households: int


class GuardAudit(BaseModel):
    k: int
    min_fraction: float
    min_households: int
    violations: List[AuditEntry]


class EvalReport(BaseModel):
    schema_version: str = REPORT_SCHEMA_VERSION
    model_version: Optional[str] = None
    seed: int
    n_real: int
    n_synthetic: int
    quantile_curves: List[QuantileCurve]
    mmd: MmdSummary
    pca: PcaSummary
    tstr: TstrSummary
    conditional_means: ConditionalMeans
    guard_audit: GuardAudit
