"""Radial profiles of the symmetric minimal surface equation.

The radial equation for u(x) = phi(|x|) reads

    phi'' / (1 + phi'^2) + (n - 1) phi' / r - (m - 1) / phi = 0,     phi(0) = 1, phi'(0) = 0,

and the modified profile solves the same equation with the fractional dimensions ``n_tilde`` and ``m_tilde``.
Both profiles stay strictly above the cone ``alpha0 * r``, so all integration is done on the excess
``w = phi - alpha0 * r`` which decays like ``kappa * r**gamma``.
"""

import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline

from ..errors import (
    BadDimensions,
    EtaTooLarge,
    ExponentGapViolated,
    InvalidParameter,
    PropertyViolation,
    StepFailure,
    WindowTooNarrow,
)
from ..model import ProfileVariant, PropertyReport
from ..utils import get_logger, read_csv, read_json, write_csv, write_json

logger = get_logger()

R_MIN = 1e-4
LINEAR_NODES = 200
NODES_PER_DECADE = 200
MIN_FIT_NODES = 20

ArrayLike = Union[float, Sequence[float], np.ndarray]


@dataclass(frozen=True)
class ConeParams:
    """Dimensions, cone slope and decay exponents of the standard and modified profiles."""

    n: int
    m: int
    ell: int
    alpha0: float
    gamma: float
    eta: float
    n_tilde: float
    m_tilde: float
    gamma_tilde: float
    e_exponent: float

    def dims(self, variant: ProfileVariant) -> Tuple[float, float]:
        """Return the (n, m) pair entering the ODE of ``variant``."""
        if ProfileVariant(variant) == ProfileVariant.MODIFIED:
            return self.n_tilde, self.m_tilde
        return float(self.n), float(self.m)

    def exponent(self, variant: ProfileVariant) -> float:
        if ProfileVariant(variant) == ProfileVariant.MODIFIED:
            return self.gamma_tilde
        return self.gamma

    def to_dict(self) -> dict:
        return {
            'n': self.n,
            'm': self.m,
            'ell': self.ell,
            'alpha0': self.alpha0,
            'gamma': self.gamma,
            'eta': self.eta,
            'n_tilde': self.n_tilde,
            'm_tilde': self.m_tilde,
            'gamma_tilde': self.gamma_tilde,
            'e_exponent': self.e_exponent,
        }


def _decay_exponent(n_eff: float, m_eff: float) -> Optional[float]:
    """Larger root of g^2 + (n+m-3) g + (n+m-2) = 0, or None when the roots are complex."""
    half = 0.5 * (n_eff + m_eff - 3.0)
    disc = half * half - (n_eff + m_eff - 2.0)
    if disc < 0:
        return None
    return -half + math.sqrt(disc)


def make_cone_params(n: int, m: int, ell: int, eta: float, e_exponent: float) -> ConeParams:
    """Build and validate the cone parameters.

    Args:
        n: Dimension of the x factor, at least 3.
        m: Dimension of the rotated factor, at least 2, with n + m >= 8.
        ell: Number of y directions, at least 1.
        eta: Dimension perturbation of the modified profile, in (0, 1/4].
        e_exponent: Exponent gap e > 0 of the lower barrier.

    Returns:
        The validated :class:`ConeParams`.

    Raises:
        BadDimensions: If a dimension gate fails.
        InvalidParameter: If eta or e_exponent is not positive.
        EtaTooLarge: If eta > 1/4 or the modified exponent would be complex.
        ExponentGapViolated: If (1 + e) |gamma| <= |gamma_tilde|.
    """
    if int(n) != n or int(m) != m or int(ell) != ell:
        raise BadDimensions(f'Dimensions must be integers, got n={n}, m={m}, ell={ell}')
    n, m, ell = int(n), int(m), int(ell)
    if n < 3 or m < 2 or n + m < 8 or ell < 1:
        raise BadDimensions(f'Need n >= 3, m >= 2, n + m >= 8 and ell >= 1, got n={n}, m={m}, ell={ell}')
    if eta <= 0:
        raise InvalidParameter(f'eta must be positive, got {eta}')
    if e_exponent <= 0:
        raise InvalidParameter(f'e_exponent must be positive, got {e_exponent}')

    alpha0 = math.sqrt((m - 1) / (n - 1))
    gamma = _decay_exponent(n, m)

    n_tilde = 1.0 + (n - 1) / (1.0 + eta)
    m_tilde = 1.0 + (m - 1) / (1.0 + eta)
    gamma_tilde = _decay_exponent(n_tilde, m_tilde)
    if gamma_tilde is None:
        raise EtaTooLarge(f'eta={eta} makes the modified decay exponent complex')
    if eta > 0.25:
        raise EtaTooLarge(f'eta must not exceed 1/4, got {eta}')
    if not gamma_tilde < gamma < 0:
        raise InvalidParameter(f'Exponent ordering failed: gamma_tilde={gamma_tilde}, gamma={gamma}')
    if (1.0 + e_exponent) * abs(gamma) <= abs(gamma_tilde):
        raise ExponentGapViolated(
            f'(1+e)|gamma| = {(1.0 + e_exponent) * abs(gamma):.6f} must exceed |gamma_tilde| = {abs(gamma_tilde):.6f}'
        )

    return ConeParams(
        n=n,
        m=m,
        ell=ell,
        alpha0=alpha0,
        gamma=gamma,
        eta=float(eta),
        n_tilde=n_tilde,
        m_tilde=m_tilde,
        gamma_tilde=gamma_tilde,
        e_exponent=float(e_exponent),
    )


@dataclass
class RadialProfile:
    """Sampled profile with first and second derivatives and its fitted asymptotics.

    ``excess`` and ``slope_excess`` hold phi - alpha0 r and phi' - alpha0 exactly as integrated, so quantities
    close to the cone never suffer from cancellation.
    """

    params: ConeParams
    variant: ProfileVariant
    r: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray
    d2phi: np.ndarray
    excess: np.ndarray
    slope_excess: np.ndarray
    kappa_fit: Optional[float] = None
    gamma_fit: Optional[float] = None
    fit_residual: Optional[float] = None
    tol: Optional[float] = None
    metadata: dict = field(default_factory=dict)

    @property
    def alpha0(self) -> float:
        return self.params.alpha0

    @property
    def series_coefficient(self) -> float:
        """Coefficient c in phi = 1 + c r^2 + O(r^4)."""
        n_eff, m_eff = self.params.dims(self.variant)
        return (m_eff - 1.0) / (2.0 * n_eff)

    @classmethod
    def from_samples(
        cls,
        params: ConeParams,
        variant: ProfileVariant,
        r: ArrayLike,
        phi: ArrayLike,
        dphi: Optional[ArrayLike] = None,
        d2phi: Optional[ArrayLike] = None,
    ) -> 'RadialProfile':
        """Wrap externally sampled values; missing derivatives come from second-order differences."""
        r = np.asarray(r, dtype=float)
        phi = np.asarray(phi, dtype=float)
        if r.ndim != 1 or r.size < 3 or np.any(np.diff(r) <= 0):
            raise InvalidParameter('Profile radii must be a strictly increasing 1-D array with at least 3 nodes')
        dphi = np.gradient(phi, r, edge_order=2) if dphi is None else np.asarray(dphi, dtype=float)
        d2phi = np.gradient(dphi, r, edge_order=2) if d2phi is None else np.asarray(d2phi, dtype=float)
        alpha0 = params.alpha0
        return cls(
            params=params,
            variant=ProfileVariant(variant),
            r=r,
            phi=phi,
            dphi=dphi,
            d2phi=d2phi,
            excess=phi - alpha0 * r,
            slope_excess=dphi - alpha0,
        )

    @cached_property
    def _excess_spline(self) -> CubicHermiteSpline:
        return CubicHermiteSpline(self.r, self.excess, self.slope_excess)

    @cached_property
    def _slope_spline(self) -> CubicHermiteSpline:
        return CubicHermiteSpline(self.r, self.slope_excess, self.d2phi)

    @cached_property
    def _slope_curvature(self):
        return self._slope_spline.derivative()

    def tail_coefficients(self) -> Tuple[float, float]:
        """Amplitude and exponent used beyond the last node."""
        if self.kappa_fit is not None and self.gamma_fit is not None:
            return self.kappa_fit, self.gamma_fit
        gamma = self.params.exponent(self.variant)
        kappa = float(self.excess[-1]) * float(self.r[-1])**(-gamma)
        return kappa, gamma


def _rhs_factory(params: ConeParams, variant: ProfileVariant):
    """Right side for the state (w, w')."""
    n_eff, m_eff = params.dims(variant)
    alpha0 = params.alpha0

    def rhs(r, state):
        w, dw = state
        p = alpha0 + dw
        phi = alpha0 * r + w
        if r < 1.0:
            bracket = (m_eff - 1.0) / phi - (n_eff - 1.0) * p / r
        else:
            # (m-1) = (n-1) alpha0^2 for both variants, so the cone terms cancel exactly
            bracket = -(n_eff - 1.0) * (alpha0 * w / (r * phi) + dw / r)
        return np.array([dw, (1.0 + p * p) * bracket])

    return rhs


def _second_derivative(params: ConeParams, variant: ProfileVariant, r: np.ndarray, w: np.ndarray,
                       dw: np.ndarray) -> np.ndarray:
    n_eff, m_eff = params.dims(variant)
    alpha0 = params.alpha0
    p = alpha0 + dw
    phi = alpha0 * r + w
    near = (m_eff - 1.0) / phi - (n_eff - 1.0) * p / r
    far = -(n_eff - 1.0) * (alpha0 * w / (r * phi) + dw / r)
    return (1.0 + p * p) * np.where(r < 1.0, near, far)


def profile_grid(r_max: float, r_min: float = R_MIN) -> np.ndarray:
    """Linear nodes on [r_min, 1] followed by log-spaced nodes up to r_max."""
    linear = np.linspace(r_min, 1.0, LINEAR_NODES)
    decades = math.log10(r_max)
    n_log = max(int(math.ceil(decades * NODES_PER_DECADE)), 2)
    logarithmic = np.logspace(0.0, decades, n_log + 1)[1:]
    return np.concatenate([linear, logarithmic])


def solve_radial(params: ConeParams, variant: ProfileVariant, r_max: float = 1e4, tol: float = 1e-10) -> RadialProfile:
    """Integrate the radial equation from the series start out to ``r_max``.

    Args:
        params: Cone parameters.
        variant: Standard or modified equation.
        r_max: Last radius of the grid, at least 10.
        tol: Relative tolerance of the integrator, in (1e-14, 1e-4).

    Returns:
        The solved profile with fitted tail on the window [r_max / 100, r_max].

    Raises:
        InvalidParameter: For out-of-range ``r_max`` or ``tol``.
        StepFailure: If the integrator cannot continue.
        PropertyViolation: If the solved profile breaks one of the profile inequalities.
    """
    variant = ProfileVariant(variant)
    if r_max < 10:
        raise InvalidParameter(f'r_max must be at least 10, got {r_max}')
    if not 1e-14 < tol < 1e-4:
        raise InvalidParameter(f'tol must lie in (1e-14, 1e-4), got {tol}')

    alpha0 = params.alpha0
    grid = profile_grid(r_max)
    n_eff, m_eff = params.dims(variant)
    c = (m_eff - 1.0) / (2.0 * n_eff)
    r0 = grid[0]
    state0 = np.array([1.0 + c * r0 * r0 - alpha0 * r0, 2.0 * c * r0 - alpha0])

    logger.debug('Integrating %s profile for (n, m) = (%s, %s) up to r = %g', variant.value, params.n, params.m, r_max)
    sol = solve_ivp(
        _rhs_factory(params, variant), (r0, grid[-1]),
        state0,
        method='DOP853',
        t_eval=grid,
        rtol=tol,
        atol=tol * 1e-10
    )
    if sol.status != 0 or sol.y.shape[1] != grid.size:
        raise StepFailure(f'Radial integration failed at r = {sol.t[-1] if sol.t.size else r0:g}: {sol.message}')

    w, dw = sol.y
    d2phi = _second_derivative(params, variant, grid, w, dw)
    profile = RadialProfile(
        params=params,
        variant=variant,
        r=grid,
        phi=alpha0 * grid + w,
        dphi=alpha0 + dw,
        d2phi=d2phi,
        excess=w,
        slope_excess=dw,
        tol=tol,
    )

    report = check_profile_properties(profile)
    if not report.passed:
        failed = [name for name, ok in report.flags.items() if not ok]
        raise PropertyViolation(f'Profile inequalities failed: {failed}, margins {report.worst_margin}')

    kappa, gamma_fit, residual = fit_asymptotics(profile, (r_max / 100.0, r_max))
    profile.kappa_fit, profile.gamma_fit, profile.fit_residual = kappa, gamma_fit, residual
    logger.info(
        'Solved %s profile (n, m) = (%s, %s): kappa=%.6g, gamma_fit=%.6f (exact %.6f)', variant.value, params.n,
        params.m, kappa, gamma_fit, params.exponent(variant)
    )
    return profile


def eval_scaled_excess(profile: RadialProfile, t: ArrayLike,
                       r: ArrayLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return t w(r/t) and its first two r-derivatives, where w = phi - alpha0 r.

    ``t`` may be an array broadcasting against ``r``, so every point can carry its own scale.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise InvalidParameter(f'Scale t must be positive, got min {float(np.min(t))}')
    r, t = np.broadcast_arrays(np.asarray(r, dtype=float), t)
    s = r / t
    w = np.empty_like(s)
    dw = np.empty_like(s)
    d2w = np.empty_like(s)

    r_first, r_last = profile.r[0], profile.r[-1]
    inner = s < r_first
    outer = s > r_last
    middle = ~(inner | outer)

    if np.any(inner):
        c = profile.series_coefficient
        si = s[inner]
        w[inner] = 1.0 + c * si * si - profile.alpha0 * si
        dw[inner] = 2.0 * c * si - profile.alpha0
        d2w[inner] = 2.0 * c
    if np.any(middle):
        sm = s[middle]
        w[middle] = profile._excess_spline(sm)
        dw[middle] = profile._slope_spline(sm)
        d2w[middle] = profile._slope_curvature(sm)
    if np.any(outer):
        kappa, gamma = profile.tail_coefficients()
        so = s[outer]
        power = kappa * so**gamma
        w[outer] = power
        dw[outer] = gamma * power / so
        d2w[outer] = gamma * (gamma - 1.0) * power / (so * so)

    return t * w, dw, d2w / t


def eval_scaled_profile(profile: RadialProfile, t: float, r: ArrayLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate the homothetic profile t phi(r/t) and its first two r-derivatives.

    Inside the grid the excess is interpolated by cubic Hermite splines built on the stored derivatives,
    below the first node the series start is used, and beyond the last node the fitted tail
    ``alpha0 s + kappa s**gamma``.
    """
    r = np.asarray(r, dtype=float)
    w, dw, d2w = eval_scaled_excess(profile, t, r)
    alpha0 = profile.alpha0
    return alpha0 * r + w, alpha0 + dw, d2w


def fit_asymptotics(profile: RadialProfile,
                    window: Optional[Tuple[float, float]] = None) -> Tuple[float, float, float]:
    """Least-squares fit of log(phi - alpha0 r) against log r.

    Args:
        profile: Profile to fit.
        window: Radii [r_lo, r_hi]; defaults to [r_last / 100, r_last].

    Returns:
        Tuple ``(kappa, gamma_fit, residual)`` where residual is the largest absolute deviation in log space.

    Raises:
        InvalidParameter: If the window leaves the grid or starts below 100 times the first radius.
        WindowTooNarrow: If fewer than 20 nodes fall in the window.
    """
    r = profile.r
    if window is None:
        window = (r[-1] / 100.0, r[-1])
    r_lo, r_hi = float(window[0]), float(window[1])
    if r_lo < 100.0 * r[0] * (1.0 - 1e-12) or r_hi > r[-1] * (1.0 + 1e-12) or r_hi <= r_lo:
        raise InvalidParameter(f'Fit window [{r_lo:g}, {r_hi:g}] must lie in [{100 * r[0]:g}, {r[-1]:g}]')

    mask = (r >= r_lo * (1.0 - 1e-12)) & (r <= r_hi * (1.0 + 1e-12))
    if np.count_nonzero(mask) < MIN_FIT_NODES:
        raise WindowTooNarrow(f'Only {np.count_nonzero(mask)} nodes in [{r_lo:g}, {r_hi:g}], need {MIN_FIT_NODES}')
    excess = profile.excess[mask]
    if np.any(excess <= 0):
        raise InvalidParameter('phi - alpha0 r must be positive inside the fit window')

    log_r = np.log(r[mask])
    log_w = np.log(excess)
    slope, intercept = np.polyfit(log_r, log_w, 1)
    residual = float(np.max(np.abs(log_w - (slope * log_r + intercept))))
    return float(math.exp(intercept)), float(slope), residual


def check_profile_properties(profile: RadialProfile) -> PropertyReport:
    """Evaluate the four profile inequalities at every interior node.

    The flags are ``convex`` (phi'' > 0), ``slope`` (0 < phi' < alpha0), ``cone_band``
    (alpha0 r < phi < alpha0 r + 1) and ``star`` (phi - r phi' > 0). Margins are absolute.
    """
    r = profile.r[1:-1]
    w = profile.excess[1:-1]
    dw = profile.slope_excess[1:-1]
    dphi = profile.dphi[1:-1]
    margins = {
        'convex': profile.d2phi[1:-1],
        'slope': np.minimum(dphi, -dw),
        'cone_band': np.minimum(w, 1.0 - w),
        'star': w - r * dw,
    }
    report = PropertyReport()
    for name, values in margins.items():
        idx = int(np.argmin(values))
        report.flags[name] = bool(values[idx] > 0)
        report.worst_margin[name] = float(values[idx])
        report.worst_location[name] = float(r[idx])
    return report


def comparison_samples() -> np.ndarray:
    return np.unique(np.concatenate([np.geomspace(1e-6, 1.0, 400), np.linspace(0.0, 1.0, 2001)[1:]]))


def comparison_margin(std: RadialProfile, mod: RadialProfile, eps: float, e_exponent: float) -> float:
    """Smallest value of phi~_eps - phi_{eps^(1+e)} over (0, 1], computed on the excesses."""
    if not 0 < eps <= 0.5:
        raise InvalidParameter(f'eps must lie in (0, 1/2], got {eps}')
    r = comparison_samples()
    lower, _, _ = eval_scaled_excess(std, eps**(1.0 + e_exponent), r)
    upper, _, _ = eval_scaled_excess(mod, eps, r)
    return float(np.min(upper - lower))


def check_comparison(std: RadialProfile, mod: RadialProfile, eps: float, e_exponent: float) -> bool:
    """Whether phi_{eps^(1+e)} <= phi~_eps on a dense sample of (0, 1]."""
    return comparison_margin(std, mod, eps, e_exponent) >= 0.0


def comparison_scan(std: RadialProfile, mod: RadialProfile, eps_values: Iterable[float],
                    e_exponent: float) -> List[Tuple[float, float]]:
    """Comparison margins over several eps; used for e = 0 where nothing is claimed."""
    rows = [(float(eps), comparison_margin(std, mod, eps, e_exponent)) for eps in eps_values]
    for eps, margin in rows:
        logger.debug('comparison eps=%g e=%g margin=%.3e', eps, e_exponent, margin)
    return rows


def _fd_weights(x0: float, nodes: np.ndarray, order: int) -> np.ndarray:
    """Finite difference weights for the ``order``-th derivative at x0 from arbitrary nodes."""
    k = nodes.size
    offsets = nodes - x0
    vander = np.vander(offsets, k, increasing=True).T
    rhs = np.zeros(k)
    rhs[order] = math.factorial(order)
    return np.linalg.solve(vander, rhs)


def ode_residual(profile: RadialProfile) -> np.ndarray:
    """Relative ODE residual at interior nodes from independent five-point difference stencils.

    Derivatives of the excess are rebuilt from ``excess`` alone, so the result measures how well the stored
    samples solve the equation. The residual is scaled by (n-1) alpha0 / r, the size of the individual terms.
    """
    params = profile.params
    n_eff, _ = params.dims(profile.variant)
    alpha0 = params.alpha0
    r, w = profile.r, profile.excess
    out = np.zeros(r.size - 4)
    for k, i in enumerate(range(2, r.size - 2)):
        nodes = r[i - 2:i + 3]
        values = w[i - 2:i + 3]
        dw = _fd_weights(r[i], nodes, 1) @ values
        d2w = _fd_weights(r[i], nodes, 2) @ values
        p = alpha0 + dw
        phi = alpha0 * r[i] + w[i]
        residual = d2w / (1.0 + p * p) + (n_eff - 1.0) * (alpha0 * w[i] / (r[i] * phi) + dw / r[i])
        out[k] = residual / ((n_eff - 1.0) * alpha0 / r[i])
    return out


def linearized_radial_apply(profile: RadialProfile, v: ArrayLike) -> np.ndarray:
    """Apply the discrete linearization of the radial operator at ``profile`` to the samples ``v``."""
    params = profile.params
    n_eff, m_eff = params.dims(profile.variant)
    r = profile.r
    v = np.asarray(v, dtype=float)
    dv = np.gradient(v, r, edge_order=2)
    d2v = np.gradient(dv, r, edge_order=2)
    p = profile.dphi
    denom = 1.0 + p * p
    return (
        d2v / denom - 2.0 * p * profile.d2phi * dv / (denom * denom) + (n_eff - 1.0) * dv / r
        + (m_eff - 1.0) * v / (profile.phi * profile.phi)
    )


def scaling_jacobi_field(profile: RadialProfile) -> np.ndarray:
    """phi - r phi', the derivative of t phi(r/t) at t = 1."""
    return profile.excess - profile.r * profile.slope_excess


def _sidecar_path(path: str) -> str:
    return os.path.splitext(path)[0] + '.json'


def save_profile(profile: RadialProfile, path: str) -> List[str]:
    """Write the profile CSV and its JSON sidecar; returns both paths."""
    write_csv(
        path, {
            'r': profile.r,
            'phi': profile.phi,
            'dphi': profile.dphi,
            'd2phi': profile.d2phi,
            'excess': profile.excess,
            'slope_excess': profile.slope_excess,
        }
    )
    sidecar = write_json(
        _sidecar_path(path), {
            'params': profile.params.to_dict(),
            'variant': profile.variant.value,
            'kappa_fit': profile.kappa_fit,
            'gamma_fit': profile.gamma_fit,
            'fit_residual': profile.fit_residual,
            'tol': profile.tol,
        }
    )
    return [path, sidecar]


def load_profile(path: str) -> RadialProfile:
    """Read a profile written by :func:`save_profile`."""
    columns = read_csv(path)
    meta = read_json(_sidecar_path(path))
    params = ConeParams(**meta['params'])
    return RadialProfile(
        params=params,
        variant=ProfileVariant(meta['variant']),
        r=columns['r'],
        phi=columns['phi'],
        dphi=columns['dphi'],
        d2phi=columns['d2phi'],
        excess=columns['excess'],
        slope_excess=columns['slope_excess'],
        kappa_fit=meta.get('kappa_fit'),
        gamma_fit=meta.get('gamma_fit'),
        fit_residual=meta.get('fit_residual'),
        tol=meta.get('tol'),
    )
