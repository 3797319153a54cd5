"""Report data models."""

from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field

from .base import SliceStatus


class PropertyReport(BaseModel):
    """Per-inequality outcome of a profile property check."""

    flags: Dict[str, bool] = Field(default_factory=dict, description='Whether each inequality holds at every node')
    worst_margin: Dict[str, float] = Field(default_factory=dict, description='Smallest margin per inequality')
    worst_location: Dict[str, float] = Field(default_factory=dict, description='Radius of the smallest margin')

    @property
    def passed(self) -> bool:
        return all(self.flags.values())


class SignReport(BaseModel):
    """Sign certificate of M(S) over a domain grid."""

    max_value: float = Field(..., description='Largest value of M(S) above its roundoff floor over the grid')
    location: Tuple[float, float] = Field(..., description='(r, y) of the largest value')
    margin: float = Field(..., description='Distance of the largest value below zero')
    raw_max: Optional[float] = Field(default=None, description='Largest discrete value of M(S) before the floor')
    roundoff_floor: Optional[float] = Field(default=None, description='Roundoff floor at the reported location')
    cross_check_max: Optional[float] = Field(
        default=None, description='Largest value of the reduced form at exact derivatives on geometric nodes'
    )
    n_radial: int = Field(default=0, description='Radial nodes per column of the sampling grid')
    n_points: int = Field(default=0, description='Number of evaluation points')

    @property
    def passed(self) -> bool:
        return self.max_value < 0


class SliceReport(BaseModel):
    """Rescaled slice comparison at one probe column."""

    y0: float = Field(..., description='Probe column')
    tau_hat: float = Field(..., description='Scale u(0, y0)')
    smallness: float = Field(..., description='u(0, y0) / h_eps(y0)')
    value: Optional[float] = Field(default=None, description='Weighted C2 distance to the profile')
    max_dy: Optional[float] = Field(default=None, description='Largest |D_y u| on the slice window')
    window: Optional[float] = Field(default=None, description='Rescaled radius of the comparison window')
    status: SliceStatus = Field(default=SliceStatus.FAILED, description='Outcome')

    @property
    def passed(self) -> bool:
        return self.status == SliceStatus.PASSED


class StabilityReport(BaseModel):
    """Rayleigh quotient estimate of the strict stability constant."""

    description: str = Field(default='', description='Test family description')
    quotients: Dict[str, float] = Field(default_factory=dict, description='Quotient per test function')
    min_quotient: float = Field(..., description='Smallest quotient over the family')
    eigen_estimate: Optional[float] = Field(default=None, description='Smallest discrete generalized eigenvalue')
    weight: str = Field(default='|x|^-2', description='Weight of the denominator')
    lambda_target: float = Field(default=0.01, description='Required floor')
    e_term_bound: float = Field(default=0.0, description='Bound of the metric-derivative error term')
    jitter_seed: Optional[int] = Field(default=None, description='Seed used for the family jitter')

    @property
    def lambda_hat(self) -> float:
        if self.eigen_estimate is None:
            return self.min_quotient
        return min(self.min_quotient, self.eigen_estimate)

    @property
    def passed(self) -> bool:
        return self.lambda_hat > self.lambda_target


class StageResult(BaseModel):
    """Outcome of one pipeline stage."""

    name: str = Field(..., description='Stage name')
    passed: bool = Field(default=False, description='Whether every certificate of the stage holds')
    margins: Dict[str, float] = Field(default_factory=dict, description='Named numeric margins')
    checks: Dict[str, bool] = Field(default_factory=dict, description='Named boolean certificates')
    artifacts: List[str] = Field(default_factory=list, description='Files written by the stage')
    digests: Dict[str, str] = Field(default_factory=dict, description='SHA-256 of array artifacts')
    tables: Dict[str, List[Dict[str, float]]] = Field(default_factory=dict, description='Row tables')
    error: Optional[str] = Field(default=None, description='Error message with stage tag')


class RunReport(BaseModel):
    """Aggregate of every executed stage."""

    stages: Dict[str, StageResult] = Field(default_factory=dict, description='Stage results in execution order')
    config_digest: str = Field(default='', description='SHA-256 of the canonical config JSON')
    chosen_constants: Dict[str, float] = Field(default_factory=dict, description='Configuration constants used')

    @property
    def passed(self) -> bool:
        return bool(self.stages) and all(stage.passed for stage in self.stages.values())
