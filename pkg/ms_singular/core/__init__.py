from .bvp_solver import (
    BvpProblem,
    BvpSolution,
    ConeField,
    EpsFamily,
    GluedField,
    ProfileField,
    certify_solution,
    eps_family,
    exact_solution_refinement,
    export_solution,
    glue_checks,
    glue_global,
    slice_compare,
    slice_curves,
    slice_probe_columns,
    solve_bvp,
    truncation_defect,
)
from .characteristics import (
    CharField,
    CoefficientField,
    MetricFactor,
    assemble_metric,
    build_coefficients,
    build_patches,
    integrate_characteristics,
    invert_flow,
    minimality_certificate,
    residual_z,
    save_metric,
    tail_conservation,
    tail_exponents,
    tail_invariant,
    tail_residual,
    tail_z,
)
from .envelope import (
    Envelope,
    EnvelopeFn,
    PeriodicEnvelope,
    SmoothCutoff,
    SupersolutionField,
    SupersolutionParams,
    build_envelope,
    build_periodic_envelope,
    check_r0_bound,
    check_t_monotonicity,
    envelope_bound,
    flatness_report,
    point_bound_ratio,
    r0_threshold,
    save_envelope_probes,
    supersolution_eval,
    supersolution_grid,
    verify_supersolution,
)
from .radial_ode import (
    ConeParams,
    RadialProfile,
    check_comparison,
    check_profile_properties,
    eval_scaled_excess,
    eval_scaled_profile,
    fit_asymptotics,
    load_profile,
    make_cone_params,
    save_profile,
    solve_radial,
)
from .sme_operator import (
    ConformalFactor,
    Derivatives,
    FieldSampler,
    Grid2D,
    GridSampler,
    OperatorResidual,
    UnitFactor,
    g_minimality_residual,
    load_grid,
    q_term,
    roundoff_bound,
    sample_field,
    save_grid,
    sme_residual,
    weighted_area,
)
from .stability import (
    StabilityMesh,
    default_test_family,
    estimate_lambda,
    jacobi_apply,
    rayleigh_quotient,
    second_fundamental,
    slice_aggregate_check,
)
