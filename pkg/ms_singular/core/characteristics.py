"""Metric factor f = 1 - z making SG(u) minimal, built by the method of characteristics.

With z = 1 - f the minimality of SG(u) in the metric with conformal factor f is the first order equation

    A(alpha0 r, z) alpha0 z_r + a . Dz = c - z ((n - 1) alpha0 / r + b),

whose coefficients vanish wherever u is the cone. Characteristics start with z = 0 on r = h^2(y) / 4 and are
integrated in coordinates rescaled by h^2(y0) / 4 around an anchor y0. For r >= h^2(y) the equation reduces to
an ODE in r with the first integral (1 + alpha0^2 - alpha0^2 z)^(-beta1) z r^beta2.
"""

import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import RectBivariateSpline

from ..errors import (
    InvalidParameter,
    InversionDiverged,
    JacobianDegenerate,
    OutsideWindow,
    PatchMismatch,
    StepFailure,
    TailRootFailure,
)
from ..utils import get_logger, write_csv, write_json
from .envelope import Envelope
from .radial_ode import ConeParams
from .sme_operator import (
    ConformalFactor,
    Derivatives,
    FieldSampler,
    Grid2D,
    OperatorResidual,
    estimate_order,
    g_minimality_residual,
    q_pointwise,
    sme_pointwise,
)

logger = get_logger()

T_MAX = 5.0
ETA_HALFWIDTH = 5.0
WINDOW = 4.0
N_T = 201
N_ETA = 41
MAX_NEWTON = 30
INVERSION_TOL = 1e-12
INVERSION_FAIL = 1e-10


def tail_exponents(params: ConeParams) -> Tuple[float, float]:
    """(beta1, beta2) = (1 / (m (1 + alpha0^2) + 1), 2 (n - 1) / (m + (1 + alpha0^2)^-1))."""
    a2 = params.alpha0**2
    return 1.0 / (params.m * (1.0 + a2) + 1.0), 2.0 * (params.n - 1) / (params.m + 1.0 / (1.0 + a2))


def cone_speed_constant(params: ConeParams) -> float:
    """Radial speed c0 = alpha0 (m + (1 + alpha0^2)^-1) / 2 of characteristics with z = 0 over the cone."""
    return 0.5 * params.alpha0 * (params.m + 1.0 / (1.0 + params.alpha0**2))


def transport_weight(grad2: np.ndarray, z: np.ndarray, m: float) -> np.ndarray:
    """A(u, z) = (m + (1 + |Du|^2 - z |Du|^2)^-1) / 2."""
    return 0.5 * (m + 1.0 / (1.0 + grad2 - z * grad2))


class CoefficientValues(NamedTuple):
    a_r: np.ndarray
    a_y: np.ndarray
    b: np.ndarray
    c: np.ndarray


class CoefficientField:
    """Coefficients a, b, c of the z-equation for a field u.

    c = M(u) is kept only where the gluing cutoff varies, h^2 / 2 < r < h^2; inside u solves the equation and
    outside it is the cone.
    """

    def __init__(self, u: FieldSampler, env: Envelope, params: ConeParams):
        self.u = u
        self.env = env
        self.params = params

    def weight(self, grad2: np.ndarray, z: np.ndarray) -> np.ndarray:
        return transport_weight(grad2, z, self.params.m)

    def cone_speed(self, z: np.ndarray) -> np.ndarray:
        """A(alpha0 r, z) alpha0."""
        alpha0 = self.params.alpha0
        return self.weight(np.full_like(np.asarray(z, dtype=float), alpha0 * alpha0), z) * alpha0

    def curvature_term(self, d: Derivatives, r: np.ndarray, z: np.ndarray) -> np.ndarray:
        """E(u, z) = Delta u - (1 + (1 - z)(1 + |Du|^2)) Q(u) / ((1 + |Du|^2 - z |Du|^2)(1 + |Du|^2))."""
        grad2 = d.u_r**2 + d.u_y**2
        lap = d.u_rr + d.u_yy + (self.params.n - 1) * d.u_r / r
        return lap - (1.0 + (1.0 - z) * (1.0 + grad2)) * q_pointwise(d) / ((1.0 + grad2 - z * grad2) * (1.0 + grad2))

    def evaluate(self, r, y, z) -> CoefficientValues:
        r, y, z = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (r, y, z)))
        alpha0 = self.params.alpha0
        d = self.u.derivatives(r, y)
        weight = self.weight(d.u_r**2 + d.u_y**2, z)
        a_r = weight * d.u_r - self.cone_speed(z)
        a_y = weight * d.u_y
        b = self.curvature_term(d, r, z) - (self.params.n - 1) * alpha0 / r
        H = self.env.h_squared(y)[0]
        band = (r > 0.5 * H) & (r < H)
        c = np.zeros_like(r)
        if np.any(band):
            c[band] = sme_pointwise(Derivatives(*(v[band] for v in d)), r[band], self.params)
        return CoefficientValues(a_r, a_y, b, c)


def build_coefficients(u: FieldSampler, params: ConeParams, env: Optional[Envelope] = None) -> CoefficientField:
    env = env if env is not None else getattr(u, 'env', None)
    if env is None:
        raise InvalidParameter('build_coefficients needs an envelope for the cutoff band')
    return CoefficientField(u, env, params)


@dataclass
class CharField:
    """Characteristics of one patch, stored on a (t, eta) grid in coordinates rescaled by ``scale``.

    Rescaled points are (r / scale, (y - y0) / scale); R and Y are rescaled, Z is not.
    """

    y0: float
    scale: float
    t: np.ndarray
    eta: np.ndarray
    R: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    env: Envelope = field(repr=False)
    window: float = WINDOW

    @cached_property
    def _splines(self) -> Tuple[RectBivariateSpline, RectBivariateSpline, RectBivariateSpline]:
        return tuple(RectBivariateSpline(self.t, self.eta, v, kx=3, ky=3, s=0) for v in (self.R, self.Y, self.Z))

    def psi(self, eta: np.ndarray) -> np.ndarray:
        """Rescaled starting radius h^2(y0 + scale eta) / (4 scale)."""
        return self.env.h_squared(self.y0 + self.scale * np.asarray(eta, dtype=float))[0] / (4.0 * self.scale)

    def phi(self, t, eta) -> Tuple[np.ndarray, np.ndarray]:
        spl_r, spl_y, _ = self._splines
        return spl_r.ev(t, eta), spl_y.ev(t, eta)

    def jacobian(self, t, eta) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        spl_r, spl_y, _ = self._splines
        return spl_r.ev(t, eta, dx=1), spl_r.ev(t, eta, dy=1), spl_y.ev(t, eta, dx=1), spl_y.ev(t, eta, dy=1)

    @cached_property
    def min_jacobian(self) -> float:
        """Smallest determinant of the flow map (t, eta) -> (R, Y) over the stored nodes."""
        spl_r, spl_y, _ = self._splines
        det = (
            spl_r(self.t, self.eta, dx=1) * spl_y(self.t, self.eta, dy=1)
            - spl_r(self.t, self.eta, dy=1) * spl_y(self.t, self.eta, dx=1)
        )
        return float(np.min(det))

    def to_rescaled(self, r, y) -> Tuple[np.ndarray, np.ndarray]:
        return np.asarray(r, dtype=float) / self.scale, (np.asarray(y, dtype=float) - self.y0) / self.scale

    def covers(self, r, y) -> np.ndarray:
        rr, yy = self.to_rescaled(r, y)
        inside = np.abs(yy) <= self.window
        psi = np.where(inside, self.psi(np.clip(yy, -self.window, self.window)), np.nan)
        with np.errstate(invalid='ignore'):
            return inside & (rr >= psi * (1.0 - 1e-12)) & (rr <= self.window * psi * (1.0 + 1e-12))

    def z_derivatives(self, r, y) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """z, z_r, z_y at physical points through the inverse flow."""
        rr, yy = self.to_rescaled(r, y)
        t, eta = _invert(self, rr, yy)
        _, _, spl_z = self._splines
        z, z_t, z_e = spl_z.ev(t, eta), spl_z.ev(t, eta, dx=1), spl_z.ev(t, eta, dy=1)
        r_t, r_e, y_t, y_e = self.jacobian(t, eta)
        det = r_t * y_e - r_e * y_t
        z_r = (z_t * y_e - z_e * y_t) / det
        z_y = (z_e * r_t - z_t * r_e) / det
        return z, z_r / self.scale, z_y / self.scale

    def tail_drift(self, params: ConeParams) -> float:
        """Largest relative change of the tail first integral along characteristics once r >= h^2(y)."""
        worst = 0.0
        r = self.R * self.scale
        y = self.y0 + self.scale * self.Y
        H = self.env.h_squared(y)[0]
        for j in range(self.eta.size):
            beyond = r[:, j] >= H[:, j]
            if np.count_nonzero(beyond) < 2:
                continue
            values = tail_invariant(self.Z[beyond, j], r[beyond, j], params)
            ref = np.max(np.abs(values))
            if ref > 0:
                worst = max(worst, float((np.max(values) - np.min(values)) / ref))
        return worst


def integrate_characteristics(
    coeffs: CoefficientField,
    env: Envelope,
    y0: float,
    t_max: float = T_MAX,
    eta_halfwidth: float = ETA_HALFWIDTH,
    n_t: int = N_T,
    n_eta: int = N_ETA,
    tol: float = 1e-10,
) -> CharField:
    """Integrate the characteristic system of the patch anchored at y0.

    In rescaled variables (time rescaled with space)

        dR/dt = A(alpha0 r, Z) alpha0 + a_r,   dY/dt = a_y,   dZ/dt = scale (c - Z ((n - 1) alpha0 / r + b))

    from R = psi(eta), Y = eta, Z = 0.

    Raises:
        InvalidParameter: If h vanishes at y0 or inside the patch.
        StepFailure: If the integrator fails.
        JacobianDegenerate: If R is not increasing in t or the flow map folds.
    """
    params = coeffs.params
    H0 = float(env.h_squared(np.array([y0]))[0][0])
    if H0 <= 0:
        raise InvalidParameter(f'h vanishes at the anchor y0={y0}')
    scale = 0.25 * H0
    eta = np.linspace(-eta_halfwidth, eta_halfwidth, n_eta)
    t = np.linspace(0.0, t_max, n_t)
    psi0 = env.h_squared(y0 + scale * eta)[0] / (4.0 * scale)
    if np.any(psi0 <= 0):
        raise InvalidParameter(f'The patch around y0={y0} reaches the closed set')
    growth = (params.n - 1) * params.alpha0

    def rhs(_, state):
        R, Y, Z = state.reshape(3, n_eta)
        r = scale * R
        cv = coeffs.evaluate(r, y0 + scale * Y, Z)
        dR = coeffs.cone_speed(Z) + cv.a_r
        dZ = scale * (cv.c - Z * (growth / r + cv.b))
        return np.concatenate([dR, cv.a_y, dZ])

    state0 = np.concatenate([psi0, eta, np.zeros(n_eta)])
    sol = solve_ivp(rhs, (0.0, t_max), state0, method='DOP853', t_eval=t, rtol=tol, atol=1e-2 * tol)
    if not sol.success:
        raise StepFailure(f'Characteristics of the patch at y0={y0} failed: {sol.message}')
    R, Y, Z = (block.T for block in sol.y.reshape(3, n_eta, n_t))
    if np.any(np.diff(R, axis=0) <= 0):
        raise JacobianDegenerate(f'R is not increasing along some characteristic of the patch at y0={y0}')
    char = CharField(y0=float(y0), scale=scale, t=t, eta=eta, R=R, Y=Y, Z=Z, env=env)
    if char.min_jacobian <= 0:
        raise JacobianDegenerate(f'The flow map of the patch at y0={y0} folds: min det {char.min_jacobian:.3e}')
    logger.debug('Patch y0=%g: scale %.3e, min det %.6f, max |Z| %.3e', y0, scale, char.min_jacobian,
                 float(np.max(np.abs(Z))))
    return char


def _invert(char: CharField, r: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized Newton inversion of the flow map at rescaled points."""
    r, y = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(y, dtype=float))
    shape = r.shape
    r, y = r.ravel(), y.ravel()
    if np.any(np.abs(y) > char.window):
        raise OutsideWindow(f'Query leaves the patch window |y| <= {char.window} around y0={char.y0}')
    psi = char.psi(y)
    if np.any(r < psi * (1.0 - 1e-12)) or np.any(r > char.window * psi * (1.0 + 1e-12)):
        raise OutsideWindow(f'Query leaves the strip psi(y) <= r <= {char.window} psi(y) around y0={char.y0}')

    column = np.clip(np.searchsorted(char.eta, y), 1, char.eta.size - 1)
    column = np.where(np.abs(char.eta[column - 1] - y) < np.abs(char.eta[column] - y), column - 1, column)
    t = np.empty_like(r)
    for j in np.unique(column):
        sel = column == j
        t[sel] = np.interp(r[sel], char.R[:, j], char.t)
    eta = y.copy()

    t_max, e_max = char.t[-1], char.eta[-1]
    for _ in range(MAX_NEWTON):
        R, Y = char.phi(t, eta)
        fr, fy = R - r, Y - y
        if np.max(np.abs(fr) + np.abs(fy), initial=0.0) <= INVERSION_TOL:
            break
        r_t, r_e, y_t, y_e = char.jacobian(t, eta)
        det = r_t * y_e - r_e * y_t
        t = np.clip(t - (y_e * fr - r_e * fy) / det, 0.0, t_max)
        eta = np.clip(eta - (r_t * fy - y_t * fr) / det, -e_max, e_max)
    R, Y = char.phi(t, eta)
    error = float(np.max(np.abs(R - r) + np.abs(Y - y), initial=0.0))
    if error > INVERSION_FAIL:
        raise InversionDiverged(f'Flow inversion around y0={char.y0} stopped at error {error:.3e}')
    return t.reshape(shape), eta.reshape(shape)


def invert_flow(char: CharField, r: float, y: float) -> Tuple[float, float]:
    """(t, eta) with Phi(t, eta) = (r, y) in rescaled coordinates.

    Raises:
        OutsideWindow: If (r, y) is not in {psi(y) <= r <= 4 psi(y), |y| <= 4}.
        InversionDiverged: If Newton does not reach 1e-10.
    """
    t, eta = _invert(char, np.array([r]), np.array([y]))
    return float(t[0]), float(eta[0])


def build_patches(
    coeffs: CoefficientField,
    env: Envelope,
    y_start: float,
    y_stop: float,
    max_patches: int = 64,
    **kwargs,
) -> List[CharField]:
    """Patches anchored at y_start, y_start + h^2(y_start) / 2, ... until y_stop is passed.

    Raises:
        InvalidParameter: If more than ``max_patches`` anchors would be needed.
    """
    anchors = [float(y_start)]
    while anchors[-1] < y_stop:
        step = 0.5 * float(env.h_squared(np.array([anchors[-1]]))[0][0])
        if step <= 0:
            raise InvalidParameter(f'h vanishes at the anchor y0={anchors[-1]}')
        anchors.append(anchors[-1] + step)
        if len(anchors) > max_patches:
            raise InvalidParameter(f'[{y_start}, {y_stop}] needs more than {max_patches} patches')
    return [integrate_characteristics(coeffs, env, y0, **kwargs) for y0 in anchors]


def tail_invariant(z: np.ndarray, r: np.ndarray, params: ConeParams) -> np.ndarray:
    """(1 + alpha0^2 - alpha0^2 z)^(-beta1) z r^beta2, constant along r beyond h^2."""
    beta1, beta2 = tail_exponents(params)
    a2 = params.alpha0**2
    return (1.0 + a2 - a2 * np.asarray(z))**(-beta1) * np.asarray(z) * np.asarray(r)**beta2


def _tail_map(z: np.ndarray, params: ConeParams) -> Tuple[np.ndarray, np.ndarray]:
    beta1, _ = tail_exponents(params)
    a2 = params.alpha0**2
    s = 1.0 + a2 - a2 * z
    return z * s**(-beta1), s**(-beta1) + beta1 * a2 * z * s**(-beta1 - 1.0)


def tail_z(z_boundary, H, r, params: ConeParams) -> Tuple[np.ndarray, np.ndarray]:
    """z and z_r for r >= H from the boundary value z(H); scalar Newton per point.

    Raises:
        TailRootFailure: If Newton leaves |z| < 1 / alpha0^2 or needs more than 30 iterations.
    """
    z_boundary, H, r = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (z_boundary, H, r)))
    _, beta2 = tail_exponents(params)
    limit = 1.0 / params.alpha0**2
    target = _tail_map(z_boundary, params)[0] * (H / r)**beta2
    z = z_boundary * (H / r)**beta2
    for _ in range(MAX_NEWTON):
        value, slope = _tail_map(z, params)
        step = (value - target) / slope
        z = z - step
        if np.any(np.abs(z) >= limit):
            raise TailRootFailure(f'Tail root left |z| < {limit:.4g}')
        if np.all(np.abs(step) <= 1e-15 * np.abs(z)):
            break
    else:
        raise TailRootFailure('Tail Newton did not converge in 30 iterations')
    slope = _tail_map(z, params)[1]
    return z, -beta2 * target / (r * slope)


@dataclass
class MetricFactor(ConformalFactor):
    """f = 1 - z on {r >= h^2 / 4} over the patched columns and f = 1 on K.

    z vanishes on h^2 / 4 <= r <= h^2 / 2, comes from the patches up to r = h^2 and from the tail beyond.
    """

    params: ConeParams
    env: Envelope
    patches: List[CharField]
    columns: np.ndarray = field(default_factory=lambda: np.zeros(0))
    strip_r: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    strip_z: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    boundary_z: np.ndarray = field(default_factory=lambda: np.zeros(0))
    patch_mismatch: float = 0.0

    def __post_init__(self):
        self.patches = sorted(self.patches, key=lambda p: p.y0)
        self.beta1, self.beta2 = tail_exponents(self.params)
        self._anchors = np.array([p.y0 for p in self.patches])
        self._scales = np.array([p.scale for p in self.patches])

    def _locate(self, y: np.ndarray) -> np.ndarray:
        """Index of the patch whose rescaled window holds y most centrally, or -1."""
        if not self.patches:
            return np.full(y.shape, -1)
        offset = np.abs(y[:, None] - self._anchors[None, :]) / self._scales[None, :]
        best = np.argmin(offset, axis=1)
        return np.where(offset[np.arange(y.size), best] <= WINDOW, best, -1)

    def _patch_values(self, r: np.ndarray, y: np.ndarray, index: np.ndarray):
        z, z_r, z_y = (np.zeros_like(r) for _ in range(3))
        for k in np.unique(index):
            sel = index == k
            z[sel], z_r[sel], z_y[sel] = self.patches[k].z_derivatives(r[sel], y[sel])
        return z, z_r, z_y

    def boundary_trace(self, y) -> Tuple[np.ndarray, np.ndarray]:
        """z(h^2(y), y) and its total y-derivative."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        index = self._locate(y)
        if np.any(index < 0):
            raise OutsideWindow('Boundary trace requested outside every patch')
        H, H1, _ = self.env.h_squared(y)
        z, z_r, z_y = self._patch_values(H, y, index)
        return z, z_r * H1 + z_y

    def z_derivatives(self, r, y) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        r, y = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(y, dtype=float))
        shape = r.shape
        r, y = r.ravel(), y.ravel()
        H, H1, _ = self.env.h_squared(y)
        on_k = self.env.in_k(y) | (H <= 0)
        if np.any(~on_k & (r < 0.25 * H * (1.0 - 1e-12))):
            raise OutsideWindow('The metric factor is defined only for r >= h^2(y) / 4')
        band = ~on_k & (r > 0.5 * H) & (r < H)
        tail = ~on_k & (r >= H)
        index = self._locate(y)
        if np.any((band | tail) & (index < 0)):
            raise OutsideWindow('Query outside every characteristic patch')

        z, z_r, z_y = (np.zeros_like(r) for _ in range(3))
        if np.any(band):
            z[band], z_r[band], z_y[band] = self._patch_values(r[band], y[band], index[band])
        if np.any(tail):
            yt, Ht, H1t, rt = y[tail], H[tail], H1[tail], r[tail]
            zb, dzb = self.boundary_trace(yt)
            zt, zrt = tail_z(zb, Ht, rt, self.params)
            gb, slope_b = _tail_map(zb, self.params)
            dC = slope_b * dzb * Ht**self.beta2 + gb * self.beta2 * Ht**(self.beta2 - 1.0) * H1t
            z[tail], z_r[tail] = zt, zrt
            z_y[tail] = dC * rt**(-self.beta2) / _tail_map(zt, self.params)[1]
        return z.reshape(shape), z_r.reshape(shape), z_y.reshape(shape)

    def evaluate(self, r, y):
        z, z_r, z_y = self.z_derivatives(r, y)
        return 1.0 - z, -z_r, -z_y

    def covers(self, r, y) -> np.ndarray:
        r, y = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(y, dtype=float))
        flat_r, flat_y = r.ravel(), y.ravel()
        H = self.env.h_squared(flat_y)[0]
        on_k = self.env.in_k(flat_y) | (H <= 0)
        ok = on_k | ((flat_r >= 0.25 * H) & ((flat_r <= 0.5 * H) | (self._locate(flat_y) >= 0)))
        return ok.reshape(r.shape)

    @property
    def max_deviation(self) -> float:
        """max |f - 1| over the strip samples and boundary traces."""
        values = [np.abs(self.strip_z).ravel(), np.abs(self.boundary_z)]
        return float(np.max(np.concatenate(values), initial=0.0))

    def power_rows(self, tau: float) -> List[Dict[str, float]]:
        """max |z| / (tau h^j) per assembled column for j = 1..4."""
        rows = []
        h = self.env.h(self.columns)
        for yj, hj, zj in zip(self.columns, h, self.strip_z):
            peak = float(np.max(np.abs(zj)))
            for j in range(1, 5):
                rows.append({'y': float(yj), 'h': float(hj), 'j': float(j), 'ratio': peak / (tau * hj**j)})
        return rows


def _overlap_mismatch(a: CharField, b: CharField, env: Envelope, samples: int = 5) -> Optional[float]:
    lo = max(a.y0 - WINDOW * a.scale, b.y0 - WINDOW * b.scale)
    hi = min(a.y0 + WINDOW * a.scale, b.y0 + WINDOW * b.scale)
    if lo >= hi:
        return None
    pad = 0.05 * (hi - lo)
    y = np.linspace(lo + pad, hi - pad, samples)
    H = env.h_squared(y)[0]
    r = H[:, None] * np.linspace(0.55, 1.0, 9)[None, :]
    yy = np.broadcast_to(y[:, None], r.shape)
    za = a.z_derivatives(r, yy)[0]
    zb = b.z_derivatives(r, yy)[0]
    return float(np.max(np.abs(za - zb)))


def assemble_metric(
    patches: Sequence[CharField],
    env: Envelope,
    params: ConeParams,
    columns: Sequence[float],
    n_strip: int = 33,
    patch_tol: float = 1e-6,
) -> MetricFactor:
    """Stitch patches into a metric factor and sample the strip h^2/4 <= r <= h^2 on ``columns``.

    Raises:
        PatchMismatch: If overlapping patches disagree by more than ``patch_tol``.
    """
    metric = MetricFactor(params=params, env=env, patches=list(patches))
    mismatch = 0.0
    for a, b in zip(metric.patches, metric.patches[1:]):
        value = _overlap_mismatch(a, b, env)
        if value is not None:
            mismatch = max(mismatch, value)
    if mismatch > patch_tol:
        raise PatchMismatch(f'Overlapping patches disagree by {mismatch:.3e} > {patch_tol:.1e}')

    columns = np.asarray(columns, dtype=float)
    H = env.h_squared(columns)[0]
    strip_r = H[:, None] * np.linspace(0.25, 1.0, n_strip)[None, :]
    strip_z = metric.z_derivatives(strip_r, np.broadcast_to(columns[:, None], strip_r.shape))[0]
    metric.columns = columns
    metric.strip_r = strip_r
    metric.strip_z = strip_z
    metric.boundary_z = strip_z[:, -1].copy()
    metric.patch_mismatch = mismatch
    logger.info('Assembled metric from %d patches on %d columns: max |f - 1| %.3e, overlap mismatch %.2e',
                len(metric.patches), columns.size, metric.max_deviation, mismatch)
    return metric


def _column_rectangle(metric: MetricFactor, y_center: float, n: int, r_range: Tuple[float, float],
                      halfwidth: float, func) -> Grid2D:
    H = float(metric.env.h_squared(np.array([y_center]))[0][0])
    y = y_center + halfwidth * H * np.linspace(-1.0, 1.0, n)
    return Grid2D.rectangular(r_range[1] * H, n, y, func, r_min=r_range[0] * H)


def residual_z(
    metric: MetricFactor,
    coeffs: CoefficientField,
    y_center: float,
    n: int = 32,
    r_range: Tuple[float, float] = (0.3, 0.95),
    halfwidth: float = 0.25,
) -> OperatorResidual:
    """Finite difference residual of the z-equation on a strip rectangle around ``y_center``."""
    grid = _column_rectangle(metric, y_center, n, r_range, halfwidth, lambda r, y: metric.z_derivatives(r, y)[0])
    d = grid.operators.apply(grid.values)
    r, y, z = grid.r, grid.y_mesh, grid.values
    cv = coeffs.evaluate(r, y, z)
    growth = (metric.params.n - 1) * metric.params.alpha0
    values = (coeffs.cone_speed(z) + cv.a_r) * d.u_r + cv.a_y * d.u_y + growth * z / r + z * cv.b - cv.c
    return OperatorResidual.from_field(values, grid.interior_mask())


def tail_residual(metric: MetricFactor, y: float, r: np.ndarray) -> float:
    """Residual of the reduced ODE A(alpha0 r, z) z_r + (n - 1) z / r = 0 beyond h^2, from exact z_r."""
    z, z_r, _ = metric.z_derivatives(r, np.full_like(np.asarray(r, dtype=float), y))
    weight = transport_weight(np.full_like(z, metric.params.alpha0**2), z, metric.params.m)
    return float(np.max(np.abs(weight * z_r + (metric.params.n - 1) * z / r)))


def tail_conservation(metric: MetricFactor, y: float, r: np.ndarray) -> float:
    """Relative spread of the tail first integral at fixed y over r >= h^2(y)."""
    z = metric.z_derivatives(r, np.full_like(np.asarray(r, dtype=float), y))[0]
    values = tail_invariant(z, r, metric.params)
    ref = float(np.max(np.abs(values)))
    return 0.0 if ref == 0 else float((np.max(values) - np.min(values)) / ref)


def minimality_certificate(
    u: FieldSampler,
    metric: MetricFactor,
    y_center: float,
    levels: Sequence[int] = (16, 32, 64),
    r_range: Tuple[float, float] = (0.55, 1.6),
    halfwidth: float = 0.25,
) -> Tuple[List[float], List[float]]:
    """Sup residual of the minimality equation of SG(u) in the metric f under grid refinement.

    The rectangle straddles the outer strip and the start of the tail, where c = M(u) is carried by z.
    Returns the residuals and the observed orders between consecutive levels.
    """
    residuals = []
    for n in levels:
        grid = _column_rectangle(metric, y_center, n, r_range, halfwidth, u.values)
        residuals.append(g_minimality_residual(grid, metric, metric.params).sup_norm)
    ratio = (levels[1] - 1) / (levels[0] - 1) if len(levels) > 1 else 2.0
    return residuals, estimate_order(residuals, ratio)


def save_metric(metric: MetricFactor, path: str) -> List[str]:
    """Strip samples as an (r, y, z) CSV and a JSON sidecar with exponents and boundary traces."""
    y = np.broadcast_to(metric.columns[:, None], metric.strip_r.shape)
    write_csv(path, {'r': metric.strip_r.ravel(), 'y': y.ravel(), 'z': metric.strip_z.ravel()})
    sidecar = write_json(
        os.path.splitext(path)[0] + '.json', {
            'beta1': metric.beta1,
            'beta2': metric.beta2,
            'columns': metric.columns,
            'boundary_z': metric.boundary_z,
            'anchors': [p.y0 for p in metric.patches],
            'patch_mismatch': metric.patch_mismatch,
            'max_deviation': metric.max_deviation,
        }
    )
    return [path, sidecar]
