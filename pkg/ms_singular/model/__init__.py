from .base import ClosedSetKind, ProfileVariant, SliceStatus, StageName, YBoundary
from .config import (
    ClosedSetSpec,
    GridSpec,
    PipelineConfig,
    RadialSettings,
    SolverConstants,
    SolverTolerances,
    StabilitySettings,
)
from .reports import PropertyReport, RunReport, SignReport, SliceReport, StabilityReport, StageResult
