"""Configuration data models."""

import json
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from .base import ClosedSetKind, StageName


class ClosedSetSpec(BaseModel):
    """Description of the closed set K on the real line."""

    kind: ClosedSetKind = Field(default=ClosedSetKind.FINITE_POINTS, description='How K is described')
    points: List[float] = Field(default_factory=list, description='Points of K (finite_points)')
    intervals: List[Tuple[float, float]] = Field(
        default_factory=list, description='Closed intervals [a, b] whose union is K (interval_union)'
    )
    base_interval: Tuple[float, float] = Field(
        default=(0.0, 1.0), description='Initial interval of the Cantor-like construction'
    )
    ratio: float = Field(default=1.0 / 3.0, description='Length ratio kept on each side at every Cantor generation')
    depth: int = Field(default=6, description='Number of Cantor generations realized')

    @field_validator('intervals')
    def validate_intervals(cls, v):
        for a, b in v:
            if b < a:
                raise ValueError(f'Interval endpoints out of order: [{a}, {b}]')
        return v

    @field_validator('ratio')
    def validate_ratio(cls, v):
        if not 0.0 < v < 0.5:
            raise ValueError('Cantor ratio must lie in (0, 1/2)')
        return v

    @field_validator('depth')
    def validate_depth(cls, v):
        if v < 0:
            raise ValueError('Cantor depth must be non-negative')
        return v


class GridSpec(BaseModel):
    """Grid resolutions used by the two-dimensional stages."""

    n_rho: int = Field(default=65, description='Radial nodes per column, axis and boundary included')
    n_y: int = Field(default=32, description='Nodes in the y direction')
    y_halfwidth: float = Field(default=2.0, description='Half width of the y window when no period is set')
    supersolution_n_rho: int = Field(default=64, description='Radial nodes used to certify M(S) < 0')
    refinement_levels: int = Field(default=3, ge=2, le=5, description='Grids used by refinement-order studies')
    radial_stretch: float = Field(
        default=6.0, description='Strength b of the sinh node clustering toward the axis; 0 keeps rho uniform'
    )

    @field_validator('n_rho', 'n_y')
    def validate_resolution(cls, v):
        if v < 16:
            raise ValueError('Grid resolutions below 16 nodes are too coarse')
        return v

    @field_validator('radial_stretch')
    def validate_stretch(cls, v):
        if v < 0:
            raise ValueError('radial_stretch must be non-negative')
        return v

    @field_validator('supersolution_n_rho')
    def validate_supersolution_resolution(cls, v):
        if v < 32:
            raise ValueError('The supersolution check needs at least 32 radial nodes')
        return v


class SolverConstants(BaseModel):
    """Constants that only exist qualitatively; every value here is a configuration choice."""

    delta0: float = Field(default=0.05, description='Target bound for |D_y u|')
    kappa0: float = Field(default=0.1, description='Slice comparison tolerance')
    theta: float = Field(default=0.5, description='Relative radius of the slice comparison window')
    p_factor: float = Field(default=1.0, description='Exclusion radius multiplier around K for slice probes')
    eta_small: float = Field(default=0.05, description='Smallness threshold for u(0, y0) / h_eps(y0)')
    lambda_target: float = Field(default=0.01, description='Stability floor for the Rayleigh quotient estimate')
    bound_factor: float = Field(default=4.0, description='Envelope bound h + |h\'| + |h\'\'| < bound_factor * tau0')
    r0_constant: float = Field(default=4.0, description='Constant C in the r = 0 bound C (eps^(1/4) + tau0)^2')
    squeeze_rel_tol: float = Field(default=5e-2, description='Squeeze tolerance relative to the smallest core scale')
    patch_tol: float = Field(default=1e-6, description='Allowed disagreement of overlapping characteristic patches')
    metric_h_floor: float = Field(
        default=1e-3, description='Columns with h below this value take f = 1 instead of a characteristic patch'
    )
    grad_est_factor: float = Field(default=10.0, description='Loose multiplier for the interior gradient estimate')

    @field_validator('delta0', 'kappa0', 'p_factor', 'eta_small', 'lambda_target', 'bound_factor', 'r0_constant',
                     'squeeze_rel_tol', 'patch_tol', 'metric_h_floor', 'grad_est_factor')
    def validate_positive(cls, v):
        if v <= 0:
            raise ValueError('Solver constants must be positive')
        return v

    @field_validator('theta')
    def validate_theta(cls, v):
        if not 0.5 <= v < 1.0:
            raise ValueError('theta must lie in [1/2, 1)')
        return v


class SolverTolerances(BaseModel):
    """Newton and continuation controls."""

    newton_tol: float = Field(default=1e-10, description='Scaled residual accepted by Newton')
    max_newton_iter: int = Field(default=12, description='Newton iterations allowed per continuation step')
    max_damping_steps: int = Field(default=8, description='Step halvings allowed in the damped line search')
    sigma_step: float = Field(default=0.1, description='Initial continuation step')
    min_sigma_step: float = Field(default=1e-4, description='Continuation stalls below this step')
    sliding_samples: int = Field(default=16, description='Members of the sliding supersolution family checked')

    @field_validator('newton_tol', 'sigma_step', 'min_sigma_step')
    def validate_positive(cls, v):
        if v <= 0:
            raise ValueError('Tolerances must be positive')
        return v


class RadialSettings(BaseModel):
    """Radial ODE integration settings."""

    r_max: float = Field(default=1e4, description='Outer radius of the profile grid')
    tol: float = Field(default=1e-10, description='Relative tolerance of the integrator')

    @field_validator('r_max')
    def validate_r_max(cls, v):
        if v < 10:
            raise ValueError('r_max must be at least 10')
        return v

    @field_validator('tol')
    def validate_tol(cls, v):
        if not 1e-14 < v < 1e-4:
            raise ValueError('tol must lie in (1e-14, 1e-4)')
        return v


class StabilitySettings(BaseModel):
    """Discretization of the second variation."""

    n_r: int = Field(default=400, description='Radial nodes of the stability mesh')
    r_max: float = Field(default=12.0, description='Outer radius of the mesh in units of the profile scale')
    n_y: int = Field(default=16, description='y nodes of the mesh for two-dimensional fields')
    family_size: int = Field(default=24, description='Number of test functions in the default family')
    jitter_seed: int = Field(default=0, description='Seed of the test-function center jitter')
    jitter: float = Field(default=0.02, description='Relative jitter of bump centers')

    @field_validator('family_size')
    def validate_family_size(cls, v):
        if v < 20:
            raise ValueError('The test family needs at least 20 functions')
        return v


class PipelineConfig(BaseModel):
    """Complete configuration of a pipeline run."""

    n: int = Field(default=3, description='Dimension of the x factor')
    m: int = Field(default=5, description='Dimension of the rotated factor')
    ell: int = Field(default=1, description='Number of y directions')
    eta: float = Field(default=0.01, description='Perturbation of the modified profile dimensions')
    e_exponent: float = Field(default=0.05, description='Exponent gap e of the lower barrier scale eps^(1+e)')
    closed_set: ClosedSetSpec = Field(default_factory=lambda: ClosedSetSpec(points=[0.0]), description='The set K')
    tau: float = Field(default=1e-3, description='Supersolution amplitude tau')
    tau0: float = Field(default=0.02, description='Envelope scale tau0')
    eps_list: List[float] = Field(default_factory=lambda: [1e-2, 1e-3, 1e-4], description='Decreasing eps values')
    sign_t_values: List[float] = Field(
        default_factory=lambda: [0.0, 1e-3, 1.0], description='Values of t, besides t = eps, for the sign certificate'
    )
    smoothing_scale: Optional[float] = Field(default=None, description='Mollification scale of the distance')
    q_period: Optional[float] = Field(default=4.0, description='Period in y; None selects a reflecting window')
    radial: RadialSettings = Field(default_factory=RadialSettings, description='Radial ODE settings')
    grid: GridSpec = Field(default_factory=GridSpec, description='Two-dimensional grid resolutions')
    solver: SolverTolerances = Field(default_factory=SolverTolerances, description='Newton controls')
    chosen_constants: SolverConstants = Field(
        default_factory=SolverConstants, description='Configuration constants with no canonical value'
    )
    stability: StabilitySettings = Field(default_factory=StabilitySettings, description='Stability settings')
    slice_probes: int = Field(default=5, description='Number of probe columns for slice comparisons')
    output_dir: str = Field(default='outputs', description='Directory receiving all artifacts')
    stages: List[StageName] = Field(default_factory=StageName.ordered, description='Stages to run')

    @field_validator('n')
    def validate_n(cls, v):
        if v < 3:
            raise ValueError('n must be at least 3')
        return v

    @field_validator('eps_list')
    def validate_eps_list(cls, v):
        if len(v) < 3:
            raise ValueError('eps_list needs at least three values')
        if any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError('eps_list must be strictly decreasing')
        if any(e <= 0 for e in v):
            raise ValueError('eps values must be positive')
        return v

    @field_validator('sign_t_values')
    def validate_sign_t_values(cls, v):
        if any(t < 0 for t in v):
            raise ValueError('sign_t_values must be non-negative')
        return v

    @model_validator(mode='after')
    def _check_gates(self) -> 'PipelineConfig':
        """Run the cone parameter gates and the envelope scale ranges at parse time."""
        from ..core.radial_ode import make_cone_params

        make_cone_params(self.n, self.m, self.ell, self.eta, self.e_exponent)
        if not 0 < self.tau0 <= 0.25:
            raise ValueError('tau0 must lie in (0, 1/4]')
        if not 0 < self.tau <= self.tau0:
            raise ValueError('tau must lie in (0, tau0]')
        if self.eps_list[0] > self.tau0:
            raise ValueError('eps values must not exceed tau0')
        return self

    @classmethod
    def from_json_file(cls, path: str) -> 'PipelineConfig':
        with open(path, 'r', encoding='utf-8') as f:
            return cls.model_validate(json.load(f))
