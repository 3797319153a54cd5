"""The registered pipeline stages, in execution order."""

from typing import Dict, List

import numpy as np

from ..core.bvp_solver import (
    BvpProblem,
    ProfileField,
    eps_family,
    exact_solution_refinement,
    export_solution,
    glue_checks,
    glue_global,
    slice_compare,
    slice_curves,
    slice_probe_columns,
)
from ..core.characteristics import (
    assemble_metric,
    build_coefficients,
    build_patches,
    minimality_certificate,
    residual_z,
    save_metric,
    tail_conservation,
    tail_residual,
)
from ..core.envelope import (
    SupersolutionParams,
    build_envelope,
    build_periodic_envelope,
    check_r0_bound,
    check_t_monotonicity,
    envelope_bound,
    flatness_report,
    r0_threshold,
    save_envelope_probes,
    verify_supersolution,
)
from ..core.radial_ode import (
    check_comparison,
    check_profile_properties,
    comparison_margin,
    comparison_scan,
    save_profile,
    solve_radial,
)
from ..core.sme_operator import save_grid
from ..core.stability import (
    StabilityMesh,
    default_test_family,
    estimate_lambda,
    save_quotients,
    slice_aggregate_check,
)
from ..errors import InvalidParameter
from ..model import ProfileVariant, SliceStatus, StageName, StageResult
from ..utils import array_digest, get_logger, write_csv, write_json
from .base import Stage, register_stage

logger = get_logger()

GAMMA_FIT_TOL = 0.02
GLUE_TOL = 1e-12
INNER_STRIP_TOL = 1e-12
TAIL_CONSERVATION_TOL = 1e-8
TAIL_SPAN = 100.0
RESIDUAL_TOL = 1e-9
MIN_SLICE_PROBES = 5
MIN_MINIMALITY_ORDER = 1.5
REFINEMENT_RATIO = (3.5, 4.5)


def _rows_to_columns(rows: List[Dict[str, float]]) -> Dict[str, np.ndarray]:
    keys = list(rows[0].keys()) if rows else []
    return {key: np.array([row[key] for row in rows]) for key in keys}


def slices_verdict(rows: List[Dict[str, float]], minimum: int = MIN_SLICE_PROBES) -> bool:
    """At least ``minimum`` probe columns meet the smallness gate and every one of them passes."""
    met = [row for row in rows if row['hypothesis_met']]
    return len(met) >= minimum and all(row['passed'] for row in met)


def orders_verdict(orders: List[float], minimum: float = MIN_MINIMALITY_ORDER) -> bool:
    return len(orders) > 0 and all(order >= minimum for order in orders)


@register_stage(StageName.RADIAL)
class RadialStage(Stage):
    """Standard and modified profiles with their property, exponent and comparison certificates."""

    def run(self) -> StageResult:
        ctx, res = self.context, self.result
        params = ctx.params
        settings = self.config.radial
        for variant in (ProfileVariant.STANDARD, ProfileVariant.MODIFIED):
            profile = solve_radial(params, variant, r_max=settings.r_max, tol=settings.tol)
            if variant == ProfileVariant.STANDARD:
                ctx.std = profile
            else:
                ctx.mod = profile
            key = variant.value
            self.add_artifacts(save_profile(profile, ctx.path(self.name, f'profile_{key}.csv')))
            res.digests[f'profile_{key}'] = array_digest(profile.r, profile.excess, profile.slope_excess)

            report = check_profile_properties(profile)
            res.checks[f'properties_{key}'] = report.passed
            for name, margin in report.worst_margin.items():
                res.margins[f'{key}_{name}'] = margin

            exact = params.exponent(variant)
            error = abs(profile.gamma_fit - exact) / abs(exact)
            res.margins[f'{key}_gamma_fit'] = profile.gamma_fit
            res.margins[f'{key}_gamma_rel_error'] = error
            res.checks[f'gamma_fit_{key}'] = error <= GAMMA_FIT_TOL

        for k, eps in enumerate(self.config.eps_list):
            res.margins[f'comparison_eps{k}'] = comparison_margin(ctx.std, ctx.mod, eps, params.e_exponent)
            res.checks[f'comparison_eps{k}'] = check_comparison(ctx.std, ctx.mod, eps, params.e_exponent)
        # nothing is claimed without the exponent gap; recorded only
        scan = comparison_scan(ctx.std, ctx.mod, self.config.eps_list, 0.0)
        res.tables['comparison_no_gap'] = [{'eps': eps, 'margin': margin} for eps, margin in scan]

        lo, hi = REFINEMENT_RATIO
        rows = []
        for t, residuals in exact_solution_refinement(ctx.std, levels=self.config.grid.refinement_levels).items():
            ratios = [a / b for a, b in zip(residuals, residuals[1:])]
            rows.extend({'t': t, 'level': float(k), 'residual': value} for k, value in enumerate(residuals))
            res.margins[f'exact_ratio_min_t{t:g}'] = min(ratios)
            res.margins[f'exact_ratio_max_t{t:g}'] = max(ratios)
            res.checks[f'exact_order_t{t:g}'] = all(lo <= ratio <= hi for ratio in ratios)
        res.tables['exact_refinement'] = rows
        logger.info('Radial profiles: gamma fit %.5f (exact %.5f), modified %.5f (exact %.5f)', ctx.std.gamma_fit,
                    params.gamma, ctx.mod.gamma_fit, params.gamma_tilde)
        return self.finish()


@register_stage(StageName.ENVELOPE)
class EnvelopeStage(Stage):
    """Envelope of K, its derivative bound and the flatness table near every endpoint."""

    def run(self) -> StageResult:
        ctx, res = self.context, self.result
        config = self.config
        consts = config.chosen_constants
        env = build_envelope(config.closed_set, config.tau0, config.smoothing_scale, consts.bound_factor)
        ctx.env = env
        ctx.domain_env = env if config.q_period is None else build_periodic_envelope(env, config.q_period)

        value, where = envelope_bound(env)
        res.margins['bound'] = consts.bound_factor * config.tau0 - value
        res.margins['bound_location'] = where
        res.checks['bound'] = res.margins['bound'] > 0
        if ctx.domain_env is not env:
            # the periodizing cutoff adds derivatives away from K; reported only
            res.margins['periodic_bound_ratio'] = envelope_bound(ctx.domain_env)[0] / config.tau0

        table = flatness_report(env)
        res.margins['flatness_worst'] = table.worst
        res.margins['flatness_closed_form_error'] = table.closed_form_error
        res.checks['flatness'] = table.passed
        self.add_artifacts([
            write_csv(ctx.path(self.name, 'flatness.csv'), _rows_to_columns(table.rows)),
            save_envelope_probes(ctx.domain_env, ctx.path(self.name, 'probes.csv')),
            write_json(ctx.path(self.name, 'envelope.json'), ctx.domain_env.to_dict()),
        ])
        y = ctx.domain_env.probe_points()
        res.digests['envelope'] = array_digest(y, *ctx.domain_env.evaluate(y))
        return self.finish()


@register_stage(StageName.SUPERSOLUTION)
class SupersolutionStage(Stage):
    """Sign certificates of M(S_{t,tau,eps}) over the t values, the r = 0 bound and monotonicity in t."""

    def run(self) -> StageResult:
        ctx, res = self.context, self.result
        config = self.config
        env = ctx.require('domain_env', StageName.ENVELOPE)
        mod = ctx.require('mod', StageName.RADIAL)
        rows = []
        for k, eps in enumerate(config.eps_list):
            p = SupersolutionParams(eps, config.tau, eps)
            ratio = check_r0_bound(env, p, mod)
            threshold = r0_threshold(env, eps, config.chosen_constants.r0_constant)
            res.margins[f'r0_ratio_eps{k}'] = ratio
            res.checks[f'r0_bound_eps{k}'] = ratio <= threshold
            for i, t in enumerate([eps] + [float(t) for t in config.sign_t_values]):
                key = f'sign_eps{k}' if i == 0 else f'sign_eps{k}_t{i}'
                report = verify_supersolution(
                    env, SupersolutionParams(t, config.tau, eps), mod, n_rho=config.grid.supersolution_n_rho
                )
                res.margins[key] = report.margin
                res.checks[key] = report.passed
                rows.append({
                    'eps': eps,
                    't': t,
                    'max_value': report.max_value,
                    'raw_max': report.raw_max,
                    'roundoff_floor': report.roundoff_floor,
                    'r': report.location[0],
                    'y': report.location[1],
                    'n_radial': report.n_radial,
                    'cross_check_max': report.cross_check_max,
                    'r0_ratio': ratio,
                    'r0_threshold': threshold,
                })

        eps = config.eps_list[-1]
        lo, hi = env.window
        y = np.linspace(lo, hi, 64)
        radius = env.h_eps(y, eps)[0]
        r = radius[:, None] * np.linspace(0.0, 1.0, 16)[None, :]
        yy = np.broadcast_to(y[:, None], r.shape)
        t_values = np.geomspace(eps, 1.0, 8)
        res.checks['t_monotone'] = check_t_monotonicity(env, config.tau, eps, mod, t_values, r, yy)
        self.add_artifacts([write_csv(ctx.path(self.name, 'sign_reports.csv'), _rows_to_columns(rows))])
        return self.finish()


@register_stage(StageName.BVP)
class BvpStage(Stage):
    """eps family of Dirichlet solutions, the glued global u and the slice comparisons."""

    def run(self) -> StageResult:
        ctx, res = self.context, self.result
        config = self.config
        consts = config.chosen_constants
        std = ctx.require('std', StageName.RADIAL)
        problem = BvpProblem(
            params=ctx.params,
            env=ctx.require('env', StageName.ENVELOPE),
            std=std,
            mod=ctx.require('mod', StageName.RADIAL),
            eps=config.eps_list[0],
            tau=config.tau,
            q_period=config.q_period,
            grid=config.grid,
            tolerances=config.solver,
            constants=consts,
        )
        ctx.problem = problem
        family = eps_family(problem, config.eps_list)
        ctx.family = family

        for k, solution in enumerate(family.solutions):
            self.add_artifacts(export_solution(solution, ctx.path(self.name, f'u_eps{k}.csv')))
            res.digests[f'u_eps{k}'] = array_digest(solution.u.values)
            res.margins[f'residual_eps{k}'] = solution.residual_final
            res.checks[f'residual_eps{k}'] = solution.residual_final < RESIDUAL_TOL
            for name in ('squeeze_lower', 'squeeze_upper', 'grad', 'grad_y', 'sliding', 'boundary_error',
                         'truncation_defect'):
                res.margins[f'{name}_eps{k}'] = solution.margins[name]
            res.checks[f'solution_eps{k}'] = solution.passed
        for k, value in enumerate(family.cauchy):
            res.margins[f'cauchy{k}'] = value
        res.checks['cauchy_monotone'] = family.cauchy_monotone
        res.margins['positivity'] = family.positivity_margin
        res.checks['positivity'] = family.positivity_margin > 0
        res.margins['envelope_excess'] = family.envelope_excess
        res.margins['envelope_excess_eps'] = family.envelope_excess_eps
        slack = consts.squeeze_rel_tol * family.eps[-1]**(1.0 + ctx.params.e_exponent)
        res.checks['envelope_bound'] = family.envelope_excess_eps <= slack
        for k, value in enumerate(family.limit_excess):
            res.margins[f'limit_excess_eps{k}'] = value
        res.checks['envelope_limit_trend'] = all(b < a for a, b in zip(family.limit_excess, family.limit_excess[1:]))
        res.tables['h_powers'] = family.h_power_rows

        u_tau = family.u_tau
        alpha0 = ctx.params.alpha0
        meta = {'alpha0': alpha0, 'tau': config.tau, 'eps': family.eps[-1]}
        self.add_artifacts(save_grid(u_tau, ctx.path(self.name, 'u_tau.csv'), meta))
        ctx.glued = glue_global(u_tau, problem.env, alpha0)
        ctx.glued_digest = array_digest(u_tau.rho, u_tau.y, u_tau.values, u_tau.radius)
        res.digests['glued_u'] = ctx.glued_digest

        glue = glue_checks(ctx.glued, u_tau.y)
        for name, value in glue.items():
            res.margins[f'glue_{name}'] = value
        res.checks['glue_exact'] = max(glue.values()) <= GLUE_TOL

        self._compare_slices(u_tau, problem)
        return self.finish()

    def _compare_slices(self, u_tau, problem: BvpProblem) -> None:
        ctx, res = self.context, self.result
        consts = self.config.chosen_constants
        probes = slice_probe_columns(problem.env, u_tau.y, self.config.slice_probes, consts.p_factor)
        rows, curves = [], []
        for y0 in probes:
            report = slice_compare(u_tau, float(y0), problem.std, consts)
            row = {
                'y0': report.y0,
                'tau_hat': report.tau_hat,
                'smallness': report.smallness,
                'passed': float(report.passed),
                'hypothesis_met': float(report.status != SliceStatus.HYPOTHESIS_UNMET),
            }
            if report.value is not None:
                row.update({'value': report.value, 'max_dy': report.max_dy, 'window': report.window})
                curves.append(slice_curves(u_tau, report.y0, problem.std, consts.theta))
            rows.append(row)
        res.tables['slices'] = rows
        res.checks['slices'] = slices_verdict(rows)
        res.margins['slices_met'] = float(sum(row['hypothesis_met'] for row in rows))
        res.margins['slices_passed'] = float(sum(row['passed'] for row in rows))
        columns = {key: np.concatenate([c[key] for c in curves]) if curves else np.zeros(0)
                   for key in ('y0', 's', 'u_hat', 'phi')}
        self.add_artifacts([write_csv(ctx.path(self.name, 'slice_curves.csv'), columns)])


@register_stage(StageName.METRIC)
class MetricStage(Stage):
    """Metric factor by characteristics on the probe columns and the minimality certificate of (u, f)."""

    def run(self) -> StageResult:
        ctx, res = self.context, self.result
        config = self.config
        consts = config.chosen_constants
        params = ctx.params
        glued = ctx.require('glued', StageName.BVP)
        problem = ctx.require('problem', StageName.BVP)
        env = problem.env

        u_tau = glued.u_tau
        res.checks['cross_stage_hash'] = (
            array_digest(u_tau.rho, u_tau.y, u_tau.values, u_tau.radius) == ctx.glued_digest
        )

        probes = slice_probe_columns(env, u_tau.y, config.slice_probes, consts.p_factor)
        columns = probes[env.h(probes) >= consts.metric_h_floor]
        if columns.size == 0:
            raise InvalidParameter(f'No probe column has h >= metric_h_floor={consts.metric_h_floor}')
        logger.info('Building metric patches on %d of %d probe columns', columns.size, probes.size)

        coeffs = build_coefficients(glued, params, env=env)
        H = env.h_squared(columns)[0]
        patches = []
        for yj, Hj in zip(columns, H):
            patches.extend(build_patches(coeffs, env, float(yj), float(yj + 0.25 * Hj)))
        metric = assemble_metric(patches, env, params, columns, patch_tol=consts.patch_tol)
        ctx.metric = metric

        res.margins['patch_mismatch'] = metric.patch_mismatch
        res.margins['min_jacobian'] = min(p.min_jacobian for p in metric.patches)
        res.margins['tail_drift'] = max(p.tail_drift(params) for p in metric.patches)
        inner = metric.strip_r <= 0.5 * H[:, None]
        res.margins['inner_strip_max'] = float(np.max(np.abs(metric.strip_z[inner]), initial=0.0))
        res.checks['inner_strip_zero'] = res.margins['inner_strip_max'] <= INNER_STRIP_TOL

        conservation, tail_res, z_res = 0.0, 0.0, 0.0
        for yj, Hj in zip(columns, H):
            r_tail = Hj * np.geomspace(1.0, TAIL_SPAN, 50)
            conservation = max(conservation, tail_conservation(metric, float(yj), r_tail))
            tail_res = max(tail_res, tail_residual(metric, float(yj), r_tail))
            z_res = max(z_res, residual_z(metric, coeffs, float(yj)).sup_norm)
        res.margins['tail_conservation'] = conservation
        res.margins['tail_residual'] = tail_res
        res.margins['residual_z'] = z_res
        res.checks['tail_conservation'] = conservation <= TAIL_CONSERVATION_TOL

        res.margins['f_minus_one_max'] = metric.max_deviation
        res.margins['f_minus_one_over_tau'] = metric.max_deviation / config.tau
        res.checks['f_positive'] = metric.max_deviation < 1.0
        res.checks['f_within_tau'] = metric.max_deviation < config.tau

        residuals, orders = minimality_certificate(glued, metric, float(columns[0]))
        for k, value in enumerate(residuals):
            res.margins[f'minimality_residual{k}'] = value
        for k, value in enumerate(orders):
            res.margins[f'minimality_order{k}'] = value
        res.checks['minimality_order'] = orders_verdict(orders)
        res.tables['z_powers'] = metric.power_rows(config.tau)

        self.add_artifacts(save_metric(metric, ctx.path(self.name, 'metric_strip.csv')))
        res.digests['metric_strip'] = array_digest(metric.strip_r, metric.strip_z)
        return self.finish()


@register_stage(StageName.STABILITY)
class StabilityStage(Stage):
    """Stability constant of SG(phi) and, when the glued u exists, of the two-dimensional field."""

    def run(self) -> StageResult:
        ctx, res = self.context, self.result
        config = self.config
        settings = config.stability
        target = config.chosen_constants.lambda_target
        params = ctx.params
        std = ctx.require('std', StageName.RADIAL)

        slice_mesh = StabilityMesh.build(ProfileField(std), params, settings, period=1.0, y=[0.0])
        family = default_test_family(slice_mesh, settings.family_size, settings.jitter_seed, settings.jitter)
        slice_report = estimate_lambda(slice_mesh, family, target, 'SG(phi) slice', settings.jitter_seed)
        res.margins['slice_min_quotient'] = slice_report.min_quotient
        res.margins['slice_lambda_hat'] = slice_report.lambda_hat
        res.checks['slice_stable'] = slice_report.passed
        self.add_artifacts([
            save_quotients(slice_report, ctx.path(self.name, 'quotients_slice.csv')),
            write_json(ctx.path(self.name, 'stability_slice.json'), slice_report.model_dump(mode='json')),
        ])

        if ctx.glued is not None:
            self._glued_stability(slice_report.lambda_hat)
        return self.finish()

    def _glued_stability(self, slice_lambda: float) -> None:
        ctx, res = self.context, self.result
        config = self.config
        settings = config.stability
        problem = ctx.problem
        y = None
        if problem.q_period is None:
            nodes = problem.y_nodes()[0]
            y = np.linspace(nodes[0], nodes[-1], settings.n_y)
        mesh = StabilityMesh.build(ctx.glued, ctx.params, settings, period=problem.q_period, y=y)
        family = default_test_family(mesh, settings.family_size, settings.jitter_seed, settings.jitter)

        df_max = 0.0
        if ctx.metric is not None:
            metric = ctx.metric
            yy = np.broadcast_to(metric.columns[:, None], metric.strip_r.shape)
            _, z_r, z_y = metric.z_derivatives(metric.strip_r, yy)
            df_max = float(np.max(np.hypot(z_r, z_y) * metric.strip_r))
        report = estimate_lambda(mesh, family, config.chosen_constants.lambda_target, 'glued u', settings.jitter_seed,
                                 df_max=df_max)
        ok, margin = slice_aggregate_check(report, slice_lambda)
        res.margins['glued_min_quotient'] = report.min_quotient
        res.margins['glued_lambda_hat'] = report.lambda_hat
        res.margins['e_term_bound'] = report.e_term_bound
        res.margins['aggregate_margin'] = margin
        res.checks['glued_stable'] = report.passed
        res.checks['aggregate'] = ok
        self.add_artifacts([
            save_quotients(report, ctx.path(self.name, 'quotients_glued.csv')),
            write_json(ctx.path(self.name, 'stability_glued.json'), report.model_dump(mode='json')),
        ])
