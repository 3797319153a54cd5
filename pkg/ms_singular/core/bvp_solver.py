"""Dirichlet problems for the symmetric minimal surface equation on the regularized domains.

For fixed eps and tau the problem is M(u) = 0 on {r < h_eps(y)} with u = S_{eps,tau} on r = h_eps(y). It is
solved by continuation in sigma: the boundary data move from the lower barrier phi_{eps^(1+e)} (sigma = 0)
to the supersolution (sigma = 1), every step being a damped Newton solve of the discrete system. A step is
accepted only when the squeeze phi_{eps^(1+e)} <= u <= S_{eps,tau}, the gradient bounds and the sliding
maximum principle check all hold; otherwise the step is halved.

The discrete equations carry the truncation defect of the sampled lower barrier as a fixed right-hand side,
so the sigma = 0 problem is solved exactly by phi_{eps^(1+e)} and the cone's mapping error does not leak
into the scale of the tip.
"""

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from ..errors import ContinuationStall, InvalidParameter, NewtonDiverged, SqueezeViolated
from ..model import (
    GridSpec,
    ProfileVariant,
    SliceReport,
    SliceStatus,
    SolverConstants,
    SolverTolerances,
    YBoundary,
)
from ..utils import get_logger
from .envelope import (
    Envelope,
    PeriodicEnvelope,
    SmoothCutoff,
    SupersolutionField,
    SupersolutionParams,
    build_periodic_envelope,
)
from .radial_ode import ConeParams, RadialProfile, eval_scaled_profile
from .sme_operator import (
    Derivatives,
    FieldSampler,
    Grid2D,
    GridSampler,
    max_principle_margin,
    sample_field,
    save_grid,
    sme_jacobian,
    sme_residual,
)

logger = get_logger()

SLIDING_T_MAX = 1.0
SLICE_SAMPLES = 200


@dataclass
class BvpProblem:
    """Data of one Dirichlet problem on the regularized domain {r < h_eps(y)}."""

    params: ConeParams
    env: Envelope
    std: RadialProfile
    mod: RadialProfile
    eps: float
    tau: float
    q_period: Optional[float] = None
    grid: GridSpec = field(default_factory=GridSpec)
    tolerances: SolverTolerances = field(default_factory=SolverTolerances)
    constants: SolverConstants = field(default_factory=SolverConstants)
    y_center: Optional[float] = None

    def __post_init__(self):
        tau0 = self.env.tau0
        if not 0 < self.eps <= tau0 or not 0 < self.tau <= tau0:
            raise InvalidParameter(f'eps={self.eps} and tau={self.tau} must lie in (0, tau0={tau0}]')
        if self.std.variant != ProfileVariant.STANDARD or self.mod.variant != ProfileVariant.MODIFIED:
            raise InvalidParameter('BvpProblem needs a standard and a modified profile')
        if self.q_period is not None and not isinstance(self.env, PeriodicEnvelope):
            self.env = build_periodic_envelope(self.env, self.q_period)
        elif isinstance(self.env, PeriodicEnvelope):
            if self.q_period is None:
                self.q_period = self.env.period
            elif abs(self.env.period - self.q_period) > 1e-12:
                raise InvalidParameter(f'Envelope period {self.env.period} differs from q_period {self.q_period}')

    @property
    def lower_scale(self) -> float:
        """eps^(1+e), the scale of the lower barrier."""
        return self.eps**(1.0 + self.params.e_exponent)

    @cached_property
    def upper(self) -> SupersolutionField:
        return SupersolutionField(self.env, SupersolutionParams(self.eps, self.tau, self.eps), self.mod)

    def lower(self, r: np.ndarray) -> np.ndarray:
        return eval_scaled_profile(self.std, self.lower_scale, r)[0]

    def y_nodes(self) -> Tuple[np.ndarray, YBoundary]:
        """Periodic nodes spanning one period exactly, or a reflecting window around the middle of K."""
        n_y = self.grid.n_y
        if self.q_period is not None:
            q = self.q_period
            return -0.5 * q + q * np.arange(n_y) / n_y, YBoundary.PERIODIC
        center = self.y_center
        if center is None:
            lo, hi = self.env.window
            center = 0.5 * (lo + hi)
        half = self.grid.y_halfwidth
        return np.linspace(center - half, center + half, n_y), YBoundary.REFLECT

    def make_grid(self, values: Optional[np.ndarray] = None) -> Grid2D:
        """Empty mapped grid with column radius h_eps; filled with the lower barrier unless values are given."""
        y, boundary = self.y_nodes()
        radius, radius_dy, radius_dyy = self.env.h_eps(y, self.eps)
        rho = np.linspace(0.0, 1.0, self.grid.n_rho)
        grid = Grid2D(
            rho=rho,
            y=y,
            values=np.ones((y.size, rho.size)),
            radius=radius,
            radius_dy=radius_dy,
            radius_dyy=radius_dyy,
            y_boundary=boundary,
            period=self.q_period,
            stretch=self.grid.radial_stretch,
            envelope_ref={
                **self.env.to_dict(), 'eps': self.eps,
                'tau': self.tau
            },
        )
        if values is None:
            values = self.lower(grid.r)
        return grid.with_values(values)

    def boundary_data(self, sigma: float, grid: Grid2D) -> np.ndarray:
        """(1 - sigma) phi_{eps^(1+e)}(h_eps) + sigma S_{eps,tau}(h_eps, y) per column."""
        r = grid.radius
        lower = self.lower(r)
        upper = self.upper.values(r, grid.y)
        return (1.0 - sigma) * lower + sigma * upper


@dataclass
class BvpSolution:
    """Continuation result with its certificates."""

    u: Grid2D
    sigma_path: List[Tuple[float, int, float]]
    residual_final: float
    squeeze_ok: bool
    grad_ok: bool
    margins: Dict[str, float] = field(default_factory=dict)
    checks: Dict[str, bool] = field(default_factory=dict)
    eps: float = 0.0
    tau: float = 0.0

    @property
    def passed(self) -> bool:
        return self.squeeze_ok and self.grad_ok and all(self.checks.values())


def _system(problem: BvpProblem,
            u: Grid2D,
            target: np.ndarray,
            defect: Optional[np.ndarray] = None) -> Tuple[np.ndarray, sp.csr_matrix]:
    """Scaled residual u M(u) / (m - 1) - defect at interior nodes and u - g at rho = 1, with its Jacobian."""
    m1 = problem.params.m - 1.0
    values, jac = sme_jacobian(u, problem.params)
    flat = u.values.ravel()
    interior = u.interior_mask().ravel()
    data = np.zeros_like(flat)
    data.reshape(u.shape)[:, -1] = target
    residual = np.where(interior, flat * values.ravel() / m1, flat - data)
    if defect is not None:
        residual = residual - defect
    inside = interior.astype(float)
    matrix = (
        sp.diags(inside * flat / m1, format='csr') @ jac + sp.diags(inside * values.ravel() / m1 + (1.0 - inside))
    )
    return residual, matrix.tocsc()


def truncation_defect(problem: BvpProblem, u: Grid2D) -> np.ndarray:
    """Interior rows of the discrete residual of the sampled lower barrier phi_{eps^(1+e)}.

    The lower barrier solves M = 0 exactly, so this is pure truncation error of the mapped stencils. It is
    dominated by the cone alpha0 r, which the stencils only reproduce when r is linear in rho and the column
    radius is constant in y.
    """
    residual, _ = _system(problem, u, problem.boundary_data(0.0, u))
    return np.where(u.interior_mask().ravel(), residual, 0.0)


def _newton(problem: BvpProblem,
            u: Grid2D,
            target: np.ndarray,
            defect: Optional[np.ndarray] = None) -> Tuple[Optional[Grid2D], int, float]:
    """Damped Newton; returns (solution or None, iterations, final sup residual)."""
    tol = problem.tolerances
    residual, matrix = _system(problem, u, target, defect)
    norm = float(np.max(np.abs(residual)))
    for it in range(1, tol.max_newton_iter + 1):
        if norm <= tol.newton_tol:
            return u, it - 1, norm
        step = spsolve(matrix, -residual)
        if not np.all(np.isfinite(step)):
            return None, it, norm
        lam = 1.0
        for _ in range(tol.max_damping_steps + 1):
            candidate = u.values.ravel() + lam * step
            if np.all(candidate > 0):
                trial = u.with_values(candidate)
                trial_residual, trial_matrix = _system(problem, trial, target, defect)
                trial_norm = float(np.max(np.abs(trial_residual)))
                if trial_norm < (1.0 - 1e-4 * lam) * norm:
                    u, residual, matrix, norm = trial, trial_residual, trial_matrix, trial_norm
                    break
            lam *= 0.5
        else:
            logger.debug('Line search failed at Newton iteration %d, residual %.3e', it, norm)
            return None, it, norm
        logger.debug('Newton iteration %d: residual %.3e (damping %g)', it, norm, lam)
    if norm <= tol.newton_tol:
        return u, tol.max_newton_iter, norm
    return None, tol.max_newton_iter, norm


def certify_solution(problem: BvpProblem, u: Grid2D) -> Tuple[Dict[str, float], Dict[str, bool]]:
    """Squeeze, gradient, sliding-family and positivity margins of a discrete solution."""
    consts = problem.constants
    alpha0 = problem.params.alpha0
    slack = consts.squeeze_rel_tol * problem.lower_scale
    r, y = u.r, u.y_mesh
    interior = u.interior_mask()

    margins: Dict[str, float] = {}
    margins['squeeze_lower'] = float(np.min(u.values - problem.lower(r)))
    margins['squeeze_upper'] = float(np.min(problem.upper.values(r, y) - u.values))

    d = u.operators.apply(u.values)
    grad = np.sqrt(d.u_r**2 + d.u_y**2)
    margins['grad'] = 2.0 * alpha0 - float(np.max(grad))
    margins['grad_y'] = consts.delta0 - float(np.max(np.abs(d.u_y)))
    spread = (float(np.max(u.values)) - float(np.min(u.values))) / float(np.min(u.radius))
    margins['grad_estimate'] = consts.grad_est_factor * max(1.0, spread) - float(np.max(grad))

    worst = np.inf
    for t in np.linspace(problem.eps, SLIDING_T_MAX, problem.tolerances.sliding_samples):
        upper_t = SupersolutionField(problem.env, SupersolutionParams(float(t), problem.tau, problem.eps),
                                     problem.mod).values(r, y)
        boundary_gap = min(float(np.min((upper_t - u.values)[~interior])), 0.0)
        worst = min(worst, max_principle_margin(upper_t, u) - boundary_gap)
    margins['sliding'] = worst
    margins['positivity'] = float(np.min((u.values - alpha0 * r)[interior]))

    checks = {
        'squeeze': margins['squeeze_lower'] >= -slack and margins['squeeze_upper'] >= -slack,
        'grad': margins['grad'] >= 0,
        'grad_y': margins['grad_y'] >= 0,
        'grad_estimate': margins['grad_estimate'] >= 0,
        'sliding': margins['sliding'] >= -slack,
        'positivity': margins['positivity'] > 0,
    }
    return margins, checks


def _rejection(checks: Dict[str, bool]) -> Optional[str]:
    for name in ('squeeze', 'grad', 'grad_y', 'sliding'):
        if not checks[name]:
            return name
    return None


def solve_bvp(problem: BvpProblem) -> BvpSolution:
    """Continue from the lower barrier at sigma = 0 to the supersolution data at sigma = 1.

    Raises:
        NewtonDiverged: If the sigma = 0 problem cannot be solved.
        SqueezeViolated: If the step underflows while the squeeze keeps failing.
        ContinuationStall: If the step underflows for any other reason.
    """
    tol = problem.tolerances
    u = problem.make_grid()
    defect = truncation_defect(problem, u)
    u, iters, residual = _newton(problem, u, problem.boundary_data(0.0, u), defect)
    if u is None:
        raise NewtonDiverged(f'Newton failed on the sigma = 0 problem for eps={problem.eps}, residual {residual:.3e}')
    path = [(0.0, iters, residual)]
    lift = u.radial_map[0]**2

    sigma = 0.0
    step = tol.sigma_step
    while sigma < 1.0:
        target = min(1.0, sigma + step)
        delta = problem.boundary_data(target, u) - problem.boundary_data(sigma, u)
        guess = u.with_values(u.values + delta[:, None] * lift[None, :])
        candidate, iters, residual = _newton(problem, guess, problem.boundary_data(target, u), defect)
        reason = 'newton'
        if candidate is not None:
            reason = _rejection(certify_solution(problem, candidate)[1])
        if reason is None:
            sigma, u = target, candidate
            path.append((sigma, iters, residual))
            logger.debug('Accepted sigma=%.4f after %d Newton iterations, residual %.3e', sigma, iters, residual)
            continue
        step *= 0.5
        logger.debug('Rejected sigma=%.4f (%s); step halved to %g', target, reason, step)
        if step < tol.min_sigma_step:
            if reason == 'squeeze':
                raise SqueezeViolated(f'Squeeze fails near sigma={sigma:.4f} for eps={problem.eps}')
            raise ContinuationStall(f'Continuation stalled at sigma={sigma:.4f} ({reason}) for eps={problem.eps}')

    margins, checks = certify_solution(problem, u)
    exact = problem.upper.values(u.radius, u.y)
    margins['boundary_error'] = float(np.max(np.abs(u.boundary_trace - exact)))
    margins['truncation_defect'] = float(np.max(np.abs(defect)))
    solution = BvpSolution(
        u=u,
        sigma_path=path,
        residual_final=path[-1][2],
        squeeze_ok=checks['squeeze'],
        grad_ok=checks['grad'] and checks['grad_y'],
        margins=margins,
        checks=checks,
        eps=problem.eps,
        tau=problem.tau,
    )
    logger.info(
        'Solved BVP eps=%g tau=%g in %d continuation steps: residual %.2e, squeeze margins (%.2e, %.2e)',
        problem.eps, problem.tau,
        len(path) - 1, solution.residual_final, margins['squeeze_lower'], margins['squeeze_upper']
    )
    return solution


@dataclass
class EpsFamily:
    """Solutions for decreasing eps with their convergence and limit-bound report."""

    eps: List[float]
    solutions: List[BvpSolution]
    cauchy: List[float]
    cauchy_monotone: bool
    u_tau: Grid2D
    positivity_margin: float
    envelope_excess: float
    envelope_excess_eps: float = 0.0
    limit_excess: List[float] = field(default_factory=list)
    h_power_rows: List[Dict[str, float]] = field(default_factory=list)


def eps_family(template: BvpProblem, eps_list: Sequence[float], near_k: float = 0.5) -> EpsFamily:
    """Solve for every eps and compare consecutive solutions on the smallest domain.

    The last solution stands in for u_tau. Reported with it are the interior margin of u_tau - alpha0 r, the
    excess over the limiting bound psi_tau(y) = tau exp(-1/h(y)), the excess over psi_{eps,tau,eps}(y) that
    bounds u_eps - alpha0 r at the last eps and, for columns within ``near_k`` of K, the ratios
    max_r (u_tau - alpha0 r) / (tau h^j) for j = 1..4. ``limit_excess`` holds the excess of every solution
    over psi_tau on its own grid; it shrinks towards zero with eps.

    Raises:
        InvalidParameter: If fewer than three strictly decreasing eps values are given.
    """
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 3 or any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise InvalidParameter('eps_family needs at least three strictly decreasing eps values')
    alpha0 = template.params.alpha0
    solutions = [solve_bvp(replace(template, eps=eps)) for eps in eps_list]
    u_tau = solutions[-1].u
    r, y = u_tau.r, u_tau.y_mesh

    samples = [GridSampler(sol.u, alpha0).values(r, y) for sol in solutions[:-1]] + [u_tau.values]
    cauchy = [float(np.max(np.abs(a - b))) for a, b in zip(samples, samples[1:])]
    monotone = all(b < a for a, b in zip(cauchy, cauchy[1:]))

    excess = u_tau.values - alpha0 * r
    interior = u_tau.interior_mask()
    env = template.env
    psi_tau = env.psi_limit(u_tau.y, template.tau)
    envelope_excess = float(np.max(excess - psi_tau[:, None]))
    eps_last = eps_list[-1]
    psi_eps = env.psi(u_tau.y, eps_last, template.tau, eps_last)[0]
    envelope_excess_eps = float(np.max(excess - psi_eps[:, None]))
    limit_excess = [
        float(np.max(sol.u.values - alpha0 * sol.u.r - env.psi_limit(sol.u.y, template.tau)[:, None]))
        for sol in solutions
    ]

    rows = []
    h = env.h(u_tau.y)
    column_max = np.max(excess, axis=1)
    for yj, hj, value in zip(u_tau.y, h, column_max):
        if hj <= 0 or env.distance(yj) > near_k:
            continue
        for j in range(1, 5):
            rows.append({'y': float(yj), 'h': float(hj), 'j': float(j), 'ratio': float(value / (template.tau * hj**j))})

    logger.info('eps family %s: consecutive sup differences %s', eps_list, ['%.3e' % c for c in cauchy])
    return EpsFamily(
        eps=eps_list,
        solutions=solutions,
        cauchy=cauchy,
        cauchy_monotone=monotone,
        u_tau=u_tau,
        positivity_margin=float(np.min(excess[interior])),
        envelope_excess=envelope_excess,
        envelope_excess_eps=envelope_excess_eps,
        limit_excess=limit_excess,
        h_power_rows=rows,
    )


class ConeField(FieldSampler):
    """The singular solution alpha0 r."""

    def __init__(self, alpha0: float):
        self.alpha0 = float(alpha0)

    def derivatives(self, r, y) -> Derivatives:
        r, _ = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(y, dtype=float))
        zeros = np.zeros_like(r)
        return Derivatives(self.alpha0 * r, np.full_like(r, self.alpha0), zeros, zeros, zeros, zeros)


class ProfileField(FieldSampler):
    """The y-independent field t phi(r / t) of a radial profile."""

    def __init__(self, profile: RadialProfile, t: float = 1.0):
        self.profile = profile
        self.t = float(t)

    def derivatives(self, r, y) -> Derivatives:
        r, _ = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(y, dtype=float))
        u, u_r, u_rr = eval_scaled_profile(self.profile, self.t, r)
        zeros = np.zeros_like(r)
        return Derivatives(u, u_r, u_rr, zeros, zeros, zeros)


def exact_solution_refinement(
    profile: RadialProfile,
    t_values: Sequence[float] = (0.5, 1.0, 2.0),
    levels: int = 3,
    radius: float = 1.0,
    n_y: int = 16,
) -> Dict[float, List[float]]:
    """Sup of :func:`sme_residual` on t phi(r / t) sampled on uniform grids with 32 * 2^k + 1 radial nodes.

    t phi(r / t) solves M = 0 exactly, so the residual is the truncation error of the stencils and should
    shrink by four under every halving of the spacing.
    """
    if profile.variant != ProfileVariant.STANDARD:
        raise InvalidParameter('Only the standard profile solves M(u) = 0')
    y = np.arange(n_y) / n_y
    zeros = np.zeros(n_y)
    table: Dict[float, List[float]] = {}
    for t in t_values:
        sampler = ProfileField(profile, t)
        residuals = []
        for k in range(levels):
            rho = np.linspace(0.0, 1.0, 32 * 2**k + 1)
            grid = sample_field(
                sampler, rho, y, np.full(n_y, radius), zeros, zeros, y_boundary=YBoundary.PERIODIC, period=1.0
            )
            residuals.append(sme_residual(grid, profile.params).sup_norm)
        table[float(t)] = residuals
        logger.debug('Exact solution t=%g: residuals %s', t, ['%.3e' % value for value in residuals])
    return table


class GluedField(FieldSampler):
    """The global u = zeta(r / h^2) u_tau + (1 - zeta) alpha0 r, equal to alpha0 r on K and for r >= h^2.

    Derivatives of the cutoff are exact; only u_tau is interpolated.
    """

    def __init__(self, u_tau: Grid2D, env: Envelope, alpha0: float, cutoff: Optional[SmoothCutoff] = None):
        self.u_tau = u_tau
        self.env = env
        self.alpha0 = float(alpha0)
        self.cutoff = cutoff or SmoothCutoff()
        self.sampler = GridSampler(u_tau, alpha0)
        self.cone = ConeField(alpha0)

    def cutoff_derivatives(self, r: np.ndarray, H: np.ndarray, H1: np.ndarray, H2: np.ndarray) -> Derivatives:
        """zeta(r / H(y)) and its derivatives, packed like a field."""
        x = r / H
        z, z1, z2 = self.cutoff.evaluate(x)
        x_y = -r * H1 / H**2
        x_yy = -r * (H2 / H**2 - 2.0 * H1 * H1 / H**3)
        return Derivatives(
            u=z,
            u_r=z1 / H,
            u_rr=z2 / H**2,
            u_y=z1 * x_y,
            u_ry=z2 * x_y / H - z1 * H1 / H**2,
            u_yy=z2 * x_y * x_y + z1 * x_yy,
        )

    def derivatives(self, r, y) -> Derivatives:
        r, y = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(y, dtype=float))
        shape = r.shape
        r, y = r.ravel(), y.ravel()
        out = [np.array(v, dtype=float).ravel() for v in self.cone.derivatives(r, y)]
        H, H1, H2 = self.env.h_squared(y)
        active = (H > 0) & (r < H)
        if np.any(active):
            ra, ya = r[active], y[active]
            v = self.sampler.derivatives(ra, ya)
            v = v._replace(u=v.u - self.alpha0 * ra, u_r=v.u_r - self.alpha0)
            z = self.cutoff_derivatives(ra, H[active], H1[active], H2[active])
            glued = (
                z.u * v.u,
                z.u_r * v.u + z.u * v.u_r,
                z.u_rr * v.u + 2.0 * z.u_r * v.u_r + z.u * v.u_rr,
                z.u_y * v.u + z.u * v.u_y,
                z.u_ry * v.u + z.u_r * v.u_y + z.u_y * v.u_r + z.u * v.u_ry,
                z.u_yy * v.u + 2.0 * z.u_y * v.u_y + z.u * v.u_yy,
            )
            for target, extra in zip(out, glued):
                target[active] += extra
        return Derivatives(*(v.reshape(shape) for v in out))


def glue_global(u_tau: Grid2D, env: Envelope, alpha0: float, cutoff: Optional[SmoothCutoff] = None) -> GluedField:
    return GluedField(u_tau, env, alpha0, cutoff)


def glue_checks(glued: GluedField, y: np.ndarray, samples: int = 64) -> Dict[str, float]:
    """Deviations that must vanish exactly: cone beyond h^2, u_tau inside h^2 / 2, cone on K columns."""
    y = np.asarray(y, dtype=float)
    H, _, _ = glued.env.h_squared(y)
    inner, outer, on_k = 0.0, 0.0, 0.0
    frac = np.linspace(0.0, 1.0, samples)
    for yj, Hj in zip(y, H):
        if Hj <= 0:
            r = np.linspace(0.0, float(np.min(glued.u_tau.radius)), samples)
            on_k = max(on_k, float(np.max(np.abs(glued.values(r, yj) - glued.alpha0 * r))))
            continue
        r_out = Hj * (1.0 + frac)
        outer = max(outer, float(np.max(np.abs(glued.values(r_out, yj) - glued.alpha0 * r_out))))
        r_in = 0.5 * Hj * frac
        inner = max(inner, float(np.max(np.abs(glued.values(r_in, yj) - glued.sampler.values(r_in, yj)))))
    return {'outer_cone': outer, 'inner_plateau': inner, 'k_columns': on_k}


def slice_compare(u: Grid2D, y0: float, std_profile: RadialProfile, constants: SolverConstants) -> SliceReport:
    """C^2 comparison of the rescaled slice at y0 with the standard profile.

    The slice is rescaled by tau_hat = u(0, y0), so the rescaled value at the axis is 1 = phi(0) and the
    matching profile is phi itself. The weighted distance
    sup_s |u^ - phi| / s + |u^' - phi'| + s |u^'' - phi''| is taken over s < theta h_eps(y0) / tau_hat.
    A failed smallness gate u(0, y0) / h_eps(y0) < eta_small is reported as ``hypothesis_unmet``.
    """
    sampler = GridSampler(u, std_profile.alpha0)
    tau_hat = float(sampler.values(0.0, y0))
    radius = float(sampler.column_radius(np.array([y0]))[0][0])
    smallness = tau_hat / radius
    if smallness >= constants.eta_small:
        logger.warning('Slice at y0=%g: u(0, y0) / h_eps = %.3g is not below %g', y0, smallness, constants.eta_small)
        return SliceReport(y0=y0, tau_hat=tau_hat, smallness=smallness, status=SliceStatus.HYPOTHESIS_UNMET)

    s_max = constants.theta * radius / tau_hat
    s = _slice_samples(s_max)
    d = sampler.derivatives(tau_hat * s, np.full_like(s, y0))
    phi, dphi, d2phi = eval_scaled_profile(std_profile, 1.0, s)
    err0 = np.abs(d.u / tau_hat - phi)
    err1 = np.abs(d.u_r - dphi)
    err2 = np.abs(tau_hat * d.u_rr - d2phi)
    with np.errstate(divide='ignore', invalid='ignore'):
        weighted = np.where(s > 0, err0 / np.where(s > 0, s, 1.0), 0.0) + err1 + s * err2
    value = float(np.max(weighted))
    status = SliceStatus.PASSED if value < constants.kappa0 else SliceStatus.FAILED
    return SliceReport(
        y0=y0,
        tau_hat=tau_hat,
        smallness=smallness,
        value=value,
        max_dy=float(np.max(np.abs(d.u_y))),
        window=s_max,
        status=status,
    )


def _slice_samples(s_max: float) -> np.ndarray:
    s = np.unique(np.concatenate([np.linspace(0.0, s_max, SLICE_SAMPLES), np.geomspace(1e-3, s_max, SLICE_SAMPLES)]))
    return s[s <= s_max]


def slice_curves(u: Grid2D, y0: float, std_profile: RadialProfile, theta: float = 0.5) -> Dict[str, np.ndarray]:
    """Rescaled slice u(tau_hat s, y0) / tau_hat next to phi(s), for plotting."""
    sampler = GridSampler(u, std_profile.alpha0)
    tau_hat = float(sampler.values(0.0, y0))
    radius = float(sampler.column_radius(np.array([y0]))[0][0])
    s = _slice_samples(theta * radius / tau_hat)
    u_hat = sampler.values(tau_hat * s, np.full_like(s, y0)) / tau_hat
    phi, _, _ = eval_scaled_profile(std_profile, 1.0, s)
    return {'y0': np.full_like(s, y0), 's': s, 'u_hat': u_hat, 'phi': phi}


def slice_probe_columns(env: Envelope, y: np.ndarray, count: int, p_factor: float) -> np.ndarray:
    """``count`` evenly spread grid columns whose distance to K is at least p_factor / 4."""
    y = np.asarray(y, dtype=float)
    candidates = y[env.distance(y) >= 0.25 * p_factor]
    if candidates.size <= count:
        return candidates
    idx = np.round(np.linspace(0, candidates.size - 1, count)).astype(int)
    return candidates[idx]


def export_solution(solution: BvpSolution, path: str) -> List[str]:
    """Grid CSV with a sidecar carrying the sigma path and certificate margins."""
    return save_grid(
        solution.u, path, {
            'eps': solution.eps,
            'tau': solution.tau,
            'sigma_path': [list(step) for step in solution.sigma_path],
            'residual_final': solution.residual_final,
            'margins': solution.margins,
            'checks': solution.checks,
        }
    )
