"""Second fundamental form, Jacobi operator and strict-stability estimates for SG(u).

For rotationally symmetric variations with normal speed zeta the second variation of the symmetric area is

    Q(zeta) = int (g^ij zeta_i zeta_j - |A_SG|^2 zeta^2) u^(m-1) V r^(n-1) dr dy,

and strict stability asks for Q(zeta) >= lambda int r^-2 zeta^2 u^(m-1) V r^(n-1) dr dy. The Jacobi operator
acts on vertical variations psi = V zeta. The form is a sparse matrix and the operator a matrix-free flux
difference on the same finite-volume mesh, so -sum(omega zeta L(V zeta)) equals Q_h(zeta) up to rounding.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from ..errors import (
    DomainMismatch,
    EigenSolverFailure,
    InvalidParameter,
    NonpositiveU,
    SupportTouchesBoundary,
    ZeroTestFunction,
)
from ..model import StabilityReport, StabilitySettings
from ..utils import get_logger, write_csv
from .bvp_solver import ProfileField
from .envelope import SmoothCutoff
from .radial_ode import ConeParams, RadialProfile
from .sme_operator import Derivatives, FieldSampler, Grid2D

logger = get_logger()

R_MIN_RATIO = 1e-4
HARDY_CUTS = (0.4, 0.6, 0.8, 0.95)
BUMP_WIDTH = 0.6

TestFunction = Tuple[str, np.ndarray]


@dataclass
class GeometryField:
    """Unit normal and squared second fundamental forms of G(u) and SG(u) at sample points."""

    r: np.ndarray
    y: np.ndarray
    V: np.ndarray
    nu_r: np.ndarray
    nu_y: np.ndarray
    nu_t: np.ndarray
    A2_graph: np.ndarray
    A2_sg: np.ndarray


def _geometry(d: Derivatives, r: np.ndarray, y: np.ndarray, params: ConeParams) -> GeometryField:
    u = np.asarray(d.u, dtype=float)
    if np.any(u <= 0):
        raise NonpositiveU(f'u must be positive, min value {float(np.min(u)):.3e}')
    V2 = 1.0 + d.u_r**2 + d.u_y**2
    V = np.sqrt(V2)
    g_rr = 1.0 - d.u_r**2 / V2
    g_ry = -d.u_r * d.u_y / V2
    g_yy = 1.0 - d.u_y**2 / V2
    a = g_rr * d.u_rr + g_ry * d.u_ry
    b = g_rr * d.u_ry + g_ry * d.u_yy
    c = g_ry * d.u_rr + g_yy * d.u_ry
    e = g_ry * d.u_ry + g_yy * d.u_yy
    axis = r == 0.0
    with np.errstate(divide='ignore', invalid='ignore'):
        tangential = np.where(axis, d.u_rr, d.u_r / np.where(axis, 1.0, r))
    A2_graph = (a * a + 2.0 * b * c + e * e + (params.n - 1) * tangential**2) / V2
    return GeometryField(
        r=r,
        y=y,
        V=V,
        nu_r=-d.u_r / V,
        nu_y=-d.u_y / V,
        nu_t=1.0 / V,
        A2_graph=A2_graph,
        A2_sg=A2_graph + (params.m - 1) / (V2 * u * u),
    )


def second_fundamental(
    u: Union[Grid2D, RadialProfile, FieldSampler],
    params: ConeParams,
    r: Optional[np.ndarray] = None,
    y: Optional[np.ndarray] = None,
) -> GeometryField:
    """|A_G(u)|^2 and |A_SG(u)|^2 = |A_G(u)|^2 + (m - 1) / (V^2 u^2).

    Grids use their second order difference stencils, profiles their stored exact derivatives and samplers
    are evaluated at (r, y).

    Raises:
        NonpositiveU: If u is not positive at some point.
    """
    if isinstance(u, Grid2D):
        d = u.operators.apply(u.values)
        return _geometry(d, u.r, np.asarray(u.y_mesh), params)
    if isinstance(u, RadialProfile):
        if r is not None:
            return second_fundamental(ProfileField(u), params, r, np.zeros_like(np.asarray(r, dtype=float)))
        zeros = np.zeros_like(u.r)
        d = Derivatives(u.phi, u.dphi, u.d2phi, zeros, zeros, zeros)
        return _geometry(d, u.r, zeros, params)
    if r is None:
        raise InvalidParameter('A field sampler needs sample points r (and y)')
    r = np.asarray(r, dtype=float)
    y = np.zeros_like(r) if y is None else np.asarray(y, dtype=float)
    r, y = np.broadcast_arrays(r, y)
    return _geometry(u.derivatives(r, y), r, y, params)


def _difference(n_nodes: int, steps: np.ndarray, periodic: bool) -> Tuple[sp.csr_matrix, sp.csr_matrix]:
    """Edge difference and edge average matrices of a 1-D node set."""
    n_edges = n_nodes if periodic else n_nodes - 1
    rows = np.repeat(np.arange(n_edges), 2)
    cols = np.stack([np.arange(n_edges), (np.arange(n_edges) + 1) % n_nodes], axis=1).ravel()
    diff_vals = np.stack([-1.0 / steps, 1.0 / steps], axis=1).ravel()
    diff = sp.csr_matrix((diff_vals, (rows, cols)), shape=(n_edges, n_nodes))
    avg = sp.csr_matrix((np.full(rows.size, 0.5), (rows, cols)), shape=(n_edges, n_nodes))
    return diff, avg


class StabilityMesh:
    """Finite-volume mesh in (r, y) carrying the quadratic forms of the second variation.

    Nodes are (r_i, y_j) flattened as ``j * len(r) + i``. Gradients live on r-edges, y-edges and cells; the
    stiffness matrix S assembles g^ij with the weight V u^(m-1) r^(n-1) there, and the diagonal matrices
    M_A and B carry |A_SG|^2 and r^-2 against the node measure.
    """

    def __init__(self, field: FieldSampler, params: ConeParams, r: np.ndarray, y: np.ndarray,
                 period: Optional[float] = None):
        self.field = field
        self.params = params
        self.r = np.asarray(r, dtype=float)
        self.y = np.atleast_1d(np.asarray(y, dtype=float))
        self.period = period
        if self.r.size < 4 or np.any(np.diff(self.r) <= 0) or self.r[0] <= 0:
            raise InvalidParameter('Stability mesh radii must be positive, increasing, at least 4 nodes')
        if period is None and self.y.size < 3:
            raise InvalidParameter('A non-periodic stability mesh needs at least 3 y nodes')

    @classmethod
    def build(cls, field: FieldSampler, params: ConeParams, settings: StabilitySettings,
              period: Optional[float] = None, y: Optional[Sequence[float]] = None,
              scale: float = 1.0) -> 'StabilityMesh':
        """Log-spaced radii in [r_max * 1e-4, r_max] times ``scale``; periodic y nodes when a period is set."""
        r = scale * np.geomspace(R_MIN_RATIO * settings.r_max, settings.r_max, settings.n_r)
        if y is None:
            if period is None:
                raise InvalidParameter('Either y nodes or a period is required')
            y = -0.5 * period + period * np.arange(settings.n_y) / settings.n_y
        return cls(field, params, r, np.asarray(y, dtype=float), period)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.y.size, self.r.size

    @property
    def periodic(self) -> bool:
        return self.period is not None

    def slice(self, y0: float = 0.0) -> 'StabilityMesh':
        """One-row periodic mesh with the same radii; y-constant functions reduce to it exactly."""
        return StabilityMesh(self.field, self.params, self.r, np.array([y0]), self.period or 1.0)

    @cached_property
    def _y_layout(self):
        if self.periodic:
            step = self.period / self.y.size
            steps = np.full(self.y.size, step)
            return steps, steps.copy(), self.y + 0.5 * step
        steps = np.diff(self.y)
        widths = np.zeros(self.y.size)
        widths[:-1] += 0.5 * steps
        widths[1:] += 0.5 * steps
        return steps, widths, 0.5 * (self.y[:-1] + self.y[1:])

    @cached_property
    def _r_layout(self):
        steps = np.diff(self.r)
        widths = np.zeros(self.r.size)
        widths[:-1] += 0.5 * steps
        widths[1:] += 0.5 * steps
        return steps, widths, 0.5 * (self.r[:-1] + self.r[1:])

    def _weights(self, r: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """V u^(m-1) r^(n-1) times (g^rr, g^ry, g^yy)."""
        r, y = np.broadcast_arrays(r, y)
        d = self.field.derivatives(r, y)
        V2 = 1.0 + d.u_r**2 + d.u_y**2
        k = np.sqrt(V2) * d.u**(self.params.m - 1) * r**(self.params.n - 1)
        return k * (1.0 - d.u_r**2 / V2), -k * d.u_r * d.u_y / V2, k * (1.0 - d.u_y**2 / V2)

    @cached_property
    def geometry(self) -> GeometryField:
        R, Y = np.meshgrid(self.r, self.y)
        return second_fundamental(self.field, self.params, R, Y)

    @cached_property
    def node_measure(self) -> np.ndarray:
        """Flat measure omega = w_r w_y r^(n-1) of every node."""
        _, w_r, _ = self._r_layout
        _, w_y, _ = self._y_layout
        return w_y[:, None] * w_r[None, :] * self.r[None, :]**(self.params.n - 1)

    @cached_property
    def surface_measure(self) -> np.ndarray:
        u = self.field.values(*np.meshgrid(self.r, self.y))
        return self.node_measure * u**(self.params.m - 1) * self.geometry.V

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        dr, _, r_mid = self._r_layout
        dy, w_y, y_mid = self._y_layout
        _, w_r, _ = self._r_layout
        n_y, n_r = self.shape
        d_r, avg_r = _difference(n_r, dr, periodic=False)
        d_y, avg_y = _difference(n_y, dy, periodic=self.periodic)
        eye_r = sp.identity(n_r, format='csr')
        eye_y = sp.identity(n_y, format='csr')

        grad_r = sp.kron(eye_y, d_r, format='csr')
        grad_y = sp.kron(d_y, eye_r, format='csr')
        cell_r = sp.kron(avg_y, d_r, format='csr')
        cell_y = sp.kron(d_y, avg_r, format='csr')

        c_rr, _, _ = self._weights(r_mid[None, :], self.y[:, None])
        _, _, c_yy = self._weights(self.r[None, :], y_mid[:, None])
        _, c_ry, _ = self._weights(r_mid[None, :], y_mid[:, None])
        w_edge_r = (c_rr * dr[None, :] * w_y[:, None]).ravel()
        w_edge_y = (c_yy * w_r[None, :] * dy[:, None]).ravel()
        w_cell = (c_ry * dr[None, :] * dy[:, None]).ravel()

        stiffness = (
            grad_r.T @ sp.diags(w_edge_r) @ grad_r + grad_y.T @ sp.diags(w_edge_y) @ grad_y
            + cell_r.T @ sp.diags(w_cell) @ cell_y + cell_y.T @ sp.diags(w_cell) @ cell_r
        )
        return stiffness.tocsr()

    @cached_property
    def curvature_mass(self) -> np.ndarray:
        return self.surface_measure * self.geometry.A2_sg

    @cached_property
    def hardy_mass(self) -> np.ndarray:
        return self.surface_measure / self.r[None, :]**2

    @cached_property
    def active(self) -> np.ndarray:
        """Nodes where test functions may be nonzero."""
        mask = np.ones(self.shape, dtype=bool)
        mask[:, 0] = False
        mask[:, -1] = False
        if not self.periodic:
            mask[0, :] = False
            mask[-1, :] = False
        return mask

    def form_matrix(self) -> sp.csr_matrix:
        """S - M_A, the matrix of the discrete second variation."""
        return (self.stiffness - sp.diags(self.curvature_mass.ravel())).tocsr()

    def check_support(self, zeta: np.ndarray) -> np.ndarray:
        zeta = np.asarray(zeta, dtype=float)
        if zeta.shape != self.shape:
            raise DomainMismatch(f'Test function shape {zeta.shape} does not match the mesh {self.shape}')
        if np.any(zeta[~self.active] != 0):
            raise SupportTouchesBoundary('Test function does not vanish on the mesh boundary')
        return zeta


def numerator(mesh: StabilityMesh, zeta: np.ndarray) -> float:
    """Q_h(zeta) = zeta^T (S - M_A) zeta."""
    flat = mesh.check_support(zeta).ravel()
    return float(flat @ (mesh.form_matrix() @ flat))


def _node_divergence(flux: np.ndarray, axis: int, periodic: bool) -> np.ndarray:
    """Edge after minus edge before at every node; missing edges count as zero."""
    if periodic:
        return flux - np.roll(flux, 1, axis=axis)
    pad = [(0, 0)] * flux.ndim
    pad[axis] = (1, 1)
    return np.diff(np.pad(flux, pad), axis=axis)


def _node_average(cells: np.ndarray, axis: int, periodic: bool) -> np.ndarray:
    if periodic:
        return 0.5 * (cells + np.roll(cells, 1, axis=axis))
    pad = [(0, 0)] * cells.ndim
    pad[axis] = (1, 1)
    padded = np.pad(cells, pad)
    lo = [slice(None)] * cells.ndim
    hi = [slice(None)] * cells.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    return 0.5 * (padded[tuple(lo)] + padded[tuple(hi)])


def jacobi_apply(mesh: StabilityMesh, psi: np.ndarray) -> np.ndarray:
    """L_u(psi) on the mesh for a vertical variation psi, i.e. normal speed zeta = psi / V.

    The operator is assembled in flux form,

        L_u(psi) = r^(1-n) d_i(V u^(m-1) r^(n-1) g^ij d_j zeta) + u^(m-1) V |A_SG|^2 zeta,

    with edge fluxes on r-edges and y-edges, cross fluxes on cells and |A_SG|^2 from :func:`second_fundamental`.

    Raises:
        SupportTouchesBoundary: If psi does not vanish on the mesh boundary.
    """
    geometry = mesh.geometry
    zeta = mesh.check_support(np.asarray(psi, dtype=float) / geometry.V)
    dr, w_r, r_mid = mesh._r_layout
    dy, w_y, y_mid = mesh._y_layout
    periodic = mesh.periodic

    zeta_r = np.diff(zeta, axis=1) / dr[None, :]
    if periodic:
        zeta_y = (np.roll(zeta, -1, axis=0) - zeta) / dy[:, None]
        zeta_r_cell = 0.5 * (zeta_r + np.roll(zeta_r, -1, axis=0))
    else:
        zeta_y = np.diff(zeta, axis=0) / dy[:, None]
        zeta_r_cell = 0.5 * (zeta_r[:-1] + zeta_r[1:])
    zeta_y_cell = 0.5 * (zeta_y[:, :-1] + zeta_y[:, 1:])

    c_rr, _, _ = mesh._weights(r_mid[None, :], mesh.y[:, None])
    _, _, c_yy = mesh._weights(mesh.r[None, :], y_mid[:, None])
    _, c_ry, _ = mesh._weights(r_mid[None, :], y_mid[:, None])

    flux = _node_divergence(w_y[:, None] * c_rr * zeta_r, axis=1, periodic=False)
    flux += _node_divergence(w_r[None, :] * c_yy * zeta_y, axis=0, periodic=periodic)
    flux += _node_average(
        _node_divergence(dy[:, None] * c_ry * zeta_y_cell, axis=1, periodic=False), axis=0, periodic=periodic
    )
    flux += _node_average(
        _node_divergence(dr[None, :] * c_ry * zeta_r_cell, axis=0, periodic=periodic), axis=1, periodic=False
    )

    u = mesh.field.values(*np.meshgrid(mesh.r, mesh.y))
    return flux / mesh.node_measure + u**(mesh.params.m - 1) * geometry.V * geometry.A2_sg * zeta


def rayleigh_quotient(mesh: StabilityMesh, zeta: np.ndarray) -> float:
    """Q_h(zeta) / int r^-2 zeta^2 d mu.

    Raises:
        ZeroTestFunction: If the weighted norm of zeta vanishes.
        SupportTouchesBoundary: If zeta does not vanish on the mesh boundary.
    """
    zeta = mesh.check_support(zeta)
    denominator = float(np.sum(mesh.hardy_mass * zeta * zeta))
    if denominator <= 0:
        raise ZeroTestFunction('Test function vanishes identically')
    return numerator(mesh, zeta) / denominator


def _y_modes(mesh: StabilityMesh) -> List[Tuple[str, np.ndarray]]:
    y = mesh.y
    if mesh.periodic:
        if y.size == 1:
            return [('const', np.ones(1))]
        k = 2.0 * np.pi / mesh.period
        return [('const', np.ones_like(y)), ('cos1', np.cos(k * y)), ('sin1', np.sin(k * y)),
                ('cos2', np.cos(2.0 * k * y))]
    length = y[-1] - y[0]
    modes = [(f'sin{k}', np.sin(k * np.pi * (y - y[0]) / length)) for k in range(1, 5)]
    for _, mode in modes:
        mode[[0, -1]] = 0.0
    return modes


def default_test_family(mesh: StabilityMesh, size: int = 24, seed: int = 0, jitter: float = 0.02) -> List[TestFunction]:
    """Radial bumps in log r times low y-modes, plus the Hardy log-cut sequence r^-(n+m-3)/2 chi(log r / L).

    Bump widths carry a relative jitter drawn from a generator seeded with ``seed``.

    Raises:
        InvalidParameter: If fewer than 20 functions are requested.
    """
    if size < 20:
        raise InvalidParameter(f'The test family needs at least 20 functions, got {size}')
    rng = np.random.default_rng(seed)
    cutoff = SmoothCutoff()
    s = np.log(mesh.r)
    lo, hi = s[0], s[-1]
    modes = _y_modes(mesh)
    base_mode = modes[0][1]

    family: List[TestFunction] = []
    power = 0.5 * (mesh.params.n + mesh.params.m - 3)
    middle = 0.5 * (lo + hi)
    for frac in HARDY_CUTS:
        half = 0.5 * (hi - lo) * frac
        radial = np.exp(-power * (s - middle)) * cutoff(np.abs(s - middle) / half)
        family.append((f'hardy[L={half:.3f}]', base_mode[:, None] * radial[None, :]))

    n_bumps = size - len(family)
    n_centers = -(-n_bumps // len(modes))
    margin = BUMP_WIDTH * (1.0 + jitter) * 1.05
    centers = np.linspace(max(lo + margin, np.log(0.5)), hi - margin, n_centers)
    for center in centers:
        for name, mode in modes:
            if len(family) == size:
                break
            width = BUMP_WIDTH * (1.0 + jitter * rng.uniform(-1.0, 1.0))
            radial = cutoff(np.abs(s - center) / width)
            family.append((f'bump[c={np.exp(center):.3f},w={width:.3f}]*{name}', mode[:, None] * radial[None, :]))

    active = mesh.active
    return [(name, np.where(active, zeta, 0.0) / np.max(np.abs(zeta))) for name, zeta in family]


def estimate_lambda(
    mesh: StabilityMesh,
    family: Sequence[TestFunction],
    lambda_target: float = 0.01,
    description: str = '',
    jitter_seed: Optional[int] = None,
    df_max: float = 0.0,
    refine: bool = True,
) -> StabilityReport:
    """Smallest Rayleigh quotient over ``family`` and the smallest discrete generalized eigenvalue.

    The eigenvalue of (S - M_A) x = lambda B x on the active nodes comes from shift-invert Lanczos with a shift
    below max(|A|^2 r^2), so the lowest eigenvalue is the one nearest the shift. ``df_max`` bounds the
    metric-derivative terms in quotient units.

    Raises:
        EigenSolverFailure: If the eigen refinement does not converge.
    """
    if len(family) < 20:
        logger.warning_once('Test family with %d functions is smaller than 20', len(family))
    quotients = {name: rayleigh_quotient(mesh, zeta) for name, zeta in family}
    eigen = None
    if refine:
        active = mesh.active.ravel()
        form = mesh.form_matrix()[active][:, active]
        weight = mesh.hardy_mass.ravel()[active]
        shift = -float(np.max(mesh.curvature_mass.ravel()[active] / weight)) - 1.0
        try:
            values = eigsh(form.tocsc(), k=1, M=sp.diags(weight).tocsc(), sigma=shift, which='LM',
                           return_eigenvectors=False, tol=1e-10)
        except (ArpackNoConvergence, RuntimeError) as e:
            raise EigenSolverFailure(f'Generalized eigenvalue refinement failed: {e}') from e
        eigen = float(np.min(values))
    report = StabilityReport(
        description=description or f'{len(family)} test functions on a {mesh.shape[0]}x{mesh.shape[1]} mesh',
        quotients=quotients,
        min_quotient=min(quotients.values()),
        eigen_estimate=eigen,
        lambda_target=lambda_target,
        e_term_bound=df_max,
        jitter_seed=jitter_seed,
    )
    logger.info('Stability %s: min quotient %.4f, eigen estimate %s, lambda_hat %.4f', report.description,
                report.min_quotient, 'n/a' if eigen is None else f'{eigen:.4f}', report.lambda_hat)
    return report


def slice_aggregate_check(report: StabilityReport, slice_lambda: float, rel_tol: float = 0.05) -> Tuple[bool, float]:
    """Whether the two-dimensional lambda_hat is at least a quarter of the slice value, up to ``rel_tol``."""
    margin = report.lambda_hat - 0.25 * slice_lambda
    return margin >= -rel_tol * abs(slice_lambda), margin


def save_quotients(report: StabilityReport, path: str) -> str:
    """Per-function quotients as an (index, quotient) CSV in family order."""
    values = list(report.quotients.values())
    return write_csv(path, {'index': np.arange(len(values)), 'quotient': values})
