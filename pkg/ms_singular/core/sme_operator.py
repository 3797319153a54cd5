"""Discrete symmetric minimal surface operator on mapped (r, y) grids.

A field u(r, y) is sampled on a rectangle in (rho, y) where every y column is scaled to its own radius,
r = R(y) s(rho), with s(rho) = rho or the odd stretch sinh(b rho) / sinh(b) that clusters nodes near the axis.
All derivatives are second order finite differences in (rho, y) assembled as sparse matrices, followed by the
chain rule back to (r, y):

    u_r  = rho_r u_rho
    u_rr = rho_r^2 u_rhorho + rho_rr u_rho
    u_y  = u_eta + rho_y u_rho
    u_ry = rho_r (u_rhoeta + rho_y u_rhorho) + rho_ry u_rho
    u_yy = u_etaeta + 2 rho_y u_rhoeta + rho_y^2 u_rhorho + rho_yy u_rho

The operator is M(u) = Delta u - Q(u) / (1 + |Du|^2) - (m - 1) / u with Delta u = u_rr + (n-1) u_r / r + u_yy.
"""

import math
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from numpy.polynomial.legendre import leggauss
from scipy.integrate import trapezoid
from scipy.interpolate import CubicSpline, RectBivariateSpline
from scipy.special import gamma as gamma_fn

from ..errors import DomainMismatch, GridTooCoarse, NonpositiveU, OutsideWindow
from ..model import YBoundary
from ..utils import read_csv, read_json, write_csv, write_json
from ..utils.io import grid_columns
from .radial_ode import ConeParams

MIN_NODES = 16
QUADRATURE_POINTS = 8


class Derivatives(NamedTuple):
    """A field and its first and second derivatives in physical (r, y) coordinates."""

    u: np.ndarray
    u_r: np.ndarray
    u_rr: np.ndarray
    u_y: np.ndarray
    u_ry: np.ndarray
    u_yy: np.ndarray


class FieldSampler(ABC):
    """A field that can be evaluated with exact derivatives at arbitrary (r, y)."""

    @abstractmethod
    def derivatives(self, r: np.ndarray, y: np.ndarray) -> Derivatives:
        """Return the field and its derivatives at the broadcast points (r, y)."""
        pass

    def values(self, r: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.derivatives(r, y).u


class ConformalFactor(ABC):
    """Conformal weight f on the rotated block of the ambient metric."""

    @abstractmethod
    def evaluate(self, r: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (f, f_r, f_y) at the broadcast points."""
        pass

    def covers(self, r: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Boolean mask of points where the factor is defined."""
        return np.ones(np.broadcast(r, y).shape, dtype=bool)


class UnitFactor(ConformalFactor):
    """The Euclidean case f = 1."""

    def evaluate(self, r, y):
        shape = np.broadcast(r, y).shape
        return np.ones(shape), np.zeros(shape), np.zeros(shape)


@dataclass
class Grid2D:
    """Samples of u on a mapped grid.

    ``values`` has shape (len(y), len(rho)). The true radius of node (j, i) is ``radius[j] * s(rho[i])``.
    """

    rho: np.ndarray
    y: np.ndarray
    values: np.ndarray
    radius: np.ndarray
    radius_dy: np.ndarray
    radius_dyy: np.ndarray
    y_boundary: YBoundary = YBoundary.ONE_SIDED
    period: Optional[float] = None
    stretch: float = 0.0
    envelope_ref: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.radius = np.broadcast_to(np.asarray(self.radius, dtype=float), self.y.shape).copy()
        self.radius_dy = np.broadcast_to(np.asarray(self.radius_dy, dtype=float), self.y.shape).copy()
        self.radius_dyy = np.broadcast_to(np.asarray(self.radius_dyy, dtype=float), self.y.shape).copy()
        self.y_boundary = YBoundary(self.y_boundary)
        if self.values.shape != (self.y.size, self.rho.size):
            raise DomainMismatch(f'values shape {self.values.shape} does not match ({self.y.size}, {self.rho.size})')

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def has_axis(self) -> bool:
        return self.rho[0] == 0.0

    @property
    def d_rho(self) -> float:
        return float(self.rho[1] - self.rho[0])

    @property
    def d_y(self) -> float:
        return float(self.y[1] - self.y[0])

    @cached_property
    def radial_map(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return radial_map(self.rho, self.stretch)

    @property
    def r(self) -> np.ndarray:
        """Physical radius of every node."""
        return self.radius[:, None] * self.radial_map[0][None, :]

    @property
    def y_mesh(self) -> np.ndarray:
        return np.broadcast_to(self.y[:, None], self.shape)

    @property
    def boundary_trace(self) -> np.ndarray:
        return self.values[:, -1]

    def with_values(self, values: np.ndarray) -> 'Grid2D':
        """Same layout with new samples; cached difference operators are shared."""
        grid = replace(self, values=np.asarray(values, dtype=float).reshape(self.shape))
        if 'operators' in self.__dict__:
            grid.__dict__['operators'] = self.__dict__['operators']
        return grid

    def same_layout(self, other: 'Grid2D') -> bool:
        return (
            self.shape == other.shape and np.array_equal(self.rho, other.rho) and np.array_equal(self.y, other.y)
            and np.array_equal(self.radius, other.radius) and self.y_boundary == other.y_boundary
            and self.stretch == other.stretch
        )

    def interior_mask(self) -> np.ndarray:
        """Nodes where the discrete equation is imposed: everything except rho = 1 and one-sided y rows."""
        mask = np.ones(self.shape, dtype=bool)
        mask[:, -1] = False
        if self.y_boundary == YBoundary.ONE_SIDED:
            mask[0, :] = False
            mask[-1, :] = False
        return mask

    @cached_property
    def operators(self) -> 'DifferenceOperators':
        return DifferenceOperators(self)

    @classmethod
    def rectangular(
        cls,
        r_max: float,
        n_rho: int,
        y: Sequence[float],
        func: Callable[[np.ndarray, np.ndarray], np.ndarray],
        r_min: float = 0.0,
        y_boundary: YBoundary = YBoundary.ONE_SIDED,
        period: Optional[float] = None,
    ) -> 'Grid2D':
        """Sample ``func(r, y)`` on a grid with constant column radius ``r_max``.

        A positive ``r_min`` drops the axis: rho then runs uniformly over [r_min / r_max, 1].
        """
        y = np.asarray(y, dtype=float)
        rho = np.linspace(r_min / r_max, 1.0, n_rho)
        r = r_max * rho[None, :] * np.ones((y.size, 1))
        values = func(r, y[:, None] * np.ones((1, n_rho)))
        return cls(
            rho=rho,
            y=y,
            values=values,
            radius=np.full(y.size, float(r_max)),
            radius_dy=np.zeros(y.size),
            radius_dyy=np.zeros(y.size),
            y_boundary=y_boundary,
            period=period,
        )


def sample_field(
    sampler: FieldSampler,
    rho: np.ndarray,
    y: np.ndarray,
    radius: np.ndarray,
    radius_dy: np.ndarray,
    radius_dyy: np.ndarray,
    y_boundary: YBoundary = YBoundary.ONE_SIDED,
    period: Optional[float] = None,
    stretch: float = 0.0,
) -> Grid2D:
    """Sample a :class:`FieldSampler` on a mapped grid."""
    s, _, _ = radial_map(np.asarray(rho, dtype=float), stretch)
    r = np.asarray(radius)[:, None] * s[None, :]
    yy = np.broadcast_to(np.asarray(y)[:, None], r.shape)
    return Grid2D(
        rho=rho,
        y=y,
        values=sampler.values(r, yy),
        radius=radius,
        radius_dy=radius_dy,
        radius_dyy=radius_dyy,
        y_boundary=y_boundary,
        period=period,
        stretch=stretch,
    )


def radial_map(rho: np.ndarray, stretch: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """s(rho) and its first two derivatives; identity for ``stretch <= 0``."""
    rho = np.asarray(rho, dtype=float)
    if stretch <= 0:
        return rho, np.ones_like(rho), np.zeros_like(rho)
    scale = math.sinh(stretch)
    return (
        np.sinh(stretch * rho) / scale,
        stretch * np.cosh(stretch * rho) / scale,
        stretch * stretch * np.sinh(stretch * rho) / scale,
    )


def inverse_radial_map(x: np.ndarray, stretch: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if stretch <= 0:
        return x
    return np.arcsinh(x * math.sinh(stretch)) / stretch


class ChainCoefficients(NamedTuple):
    """Derivatives of rho(r, y) for the map r = R(y) s(rho)."""

    rho_r: np.ndarray
    rho_rr: np.ndarray
    rho_y: np.ndarray
    rho_ry: np.ndarray
    rho_yy: np.ndarray


def chain_coefficients(rho: np.ndarray, R: np.ndarray, R1: np.ndarray, R2: np.ndarray,
                       stretch: float) -> ChainCoefficients:
    s, s1, s2 = radial_map(rho, stretch)
    rho_r = 1.0 / (R * s1)
    rho_y = -s * R1 / (R * s1)
    num = s * R1
    den = R * s1
    num_y = s1 * rho_y * R1 + s * R2
    den_y = R1 * s1 + R * s2 * rho_y
    return ChainCoefficients(
        rho_r=rho_r,
        rho_rr=-s2 / (R * R * s1**3),
        rho_y=rho_y,
        rho_ry=-den_y / (den * den),
        rho_yy=-(num_y * den - num * den_y) / (den * den),
    )


def _apply_chain(c: ChainCoefficients, v, v_rho, v_rhorho, v_eta, v_rhoeta, v_etaeta) -> Derivatives:
    return Derivatives(
        u=v,
        u_r=c.rho_r * v_rho,
        u_rr=c.rho_r * c.rho_r * v_rhorho + c.rho_rr * v_rho,
        u_y=v_eta + c.rho_y * v_rho,
        u_ry=c.rho_r * (v_rhoeta + c.rho_y * v_rhorho) + c.rho_ry * v_rho,
        u_yy=v_etaeta + 2.0 * c.rho_y * v_rhoeta + c.rho_y * c.rho_y * v_rhorho + c.rho_yy * v_rho,
    )


def _first_difference(n: int, h: float, start: str, end: str) -> sp.csr_matrix:
    """First derivative matrix; ``start``/``end`` are 'one_sided', 'reflect' or 'periodic'."""
    mat = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        mat[i, i - 1] = -0.5 / h
        mat[i, i + 1] = 0.5 / h
    if start == 'periodic':
        mat[0, n - 1] = -0.5 / h
        mat[0, 1] = 0.5 / h
        mat[n - 1, n - 2] = -0.5 / h
        mat[n - 1, 0] = 0.5 / h
        return mat.tocsr()
    if start == 'one_sided':
        mat[0, 0], mat[0, 1], mat[0, 2] = -1.5 / h, 2.0 / h, -0.5 / h
    if end == 'one_sided':
        mat[n - 1, n - 1], mat[n - 1, n - 2], mat[n - 1, n - 3] = 1.5 / h, -2.0 / h, 0.5 / h
    # 'reflect' leaves a zero row: an even extension has vanishing first derivative there
    return mat.tocsr()


def _second_difference(n: int, h: float, start: str, end: str) -> sp.csr_matrix:
    h2 = h * h
    mat = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        mat[i, i - 1] = 1.0 / h2
        mat[i, i] = -2.0 / h2
        mat[i, i + 1] = 1.0 / h2
    if start == 'periodic':
        mat[0, n - 1], mat[0, 0], mat[0, 1] = 1.0 / h2, -2.0 / h2, 1.0 / h2
        mat[n - 1, n - 2], mat[n - 1, n - 1], mat[n - 1, 0] = 1.0 / h2, -2.0 / h2, 1.0 / h2
        return mat.tocsr()
    for idx, step, mode in ((0, 1, start), (n - 1, -1, end)):
        if mode == 'reflect':
            mat[idx, idx] = -2.0 / h2
            mat[idx, idx + step] = 2.0 / h2
        else:
            for k, c in enumerate((2.0, -5.0, 4.0, -1.0)):
                mat[idx, idx + step * k] = c / h2
    return mat.tocsr()


class DifferenceOperators:
    """Sparse derivative operators of a grid acting on ``values.ravel()``.

    The flattened index of node (j, i) is ``j * len(rho) + i``. Each physical derivative is a single sparse
    matrix with the chain-rule coefficients folded in, so the Newton Jacobian reuses them directly.
    """

    def __init__(self, grid: Grid2D):
        n_y, n_rho = grid.shape
        if n_y < MIN_NODES or n_rho < MIN_NODES:
            raise GridTooCoarse(f'Grid {n_y}x{n_rho} is below the {MIN_NODES}x{MIN_NODES} minimum')
        self.shape = grid.shape
        rho_start = 'reflect' if grid.has_axis else 'one_sided'
        y_mode = {
            YBoundary.PERIODIC: 'periodic',
            YBoundary.ONE_SIDED: 'one_sided',
            YBoundary.REFLECT: 'reflect'
        }[grid.y_boundary]

        eye_rho = sp.identity(n_rho, format='csr')
        eye_y = sp.identity(n_y, format='csr')
        d1_rho = _first_difference(n_rho, grid.d_rho, rho_start, 'one_sided')
        d2_rho = _second_difference(n_rho, grid.d_rho, rho_start, 'one_sided')
        d1_y = _first_difference(n_y, grid.d_y, y_mode, y_mode)
        d2_y = _second_difference(n_y, grid.d_y, y_mode, y_mode)

        self.rho = sp.kron(eye_y, d1_rho, format='csr')
        self.rhorho = sp.kron(eye_y, d2_rho, format='csr')
        self.eta = sp.kron(d1_y, eye_rho, format='csr')
        self.etaeta = sp.kron(d2_y, eye_rho, format='csr')
        self.rhoeta = sp.kron(d1_y, d1_rho, format='csr')

        rho = np.broadcast_to(grid.rho[None, :], grid.shape).ravel()
        R = np.broadcast_to(grid.radius[:, None], grid.shape).ravel()
        dR = np.broadcast_to(grid.radius_dy[:, None], grid.shape).ravel()
        d2R = np.broadcast_to(grid.radius_dyy[:, None], grid.shape).ravel()
        c = chain_coefficients(rho, R, dR, d2R, grid.stretch)

        def diag(v):
            return sp.diags(v, format='csr')

        self.r = diag(c.rho_r) @ self.rho
        self.rr = diag(c.rho_r * c.rho_r) @ self.rhorho + diag(c.rho_rr) @ self.rho
        self.y = self.eta + diag(c.rho_y) @ self.rho
        self.ry = diag(c.rho_r) @ (self.rhoeta + diag(c.rho_y) @ self.rhorho) + diag(c.rho_ry) @ self.rho
        self.yy = (
            self.etaeta + diag(2.0 * c.rho_y) @ self.rhoeta + diag(c.rho_y * c.rho_y) @ self.rhorho
            + diag(c.rho_yy) @ self.rho
        )
        self.radius = grid.r
        self.axis = np.zeros(grid.shape, dtype=bool)
        if grid.has_axis:
            self.axis[:, 0] = True

    def apply(self, values: np.ndarray) -> Derivatives:
        flat = np.asarray(values, dtype=float).ravel()
        shape = self.shape
        return Derivatives(
            u=flat.reshape(shape),
            u_r=(self.r @ flat).reshape(shape),
            u_rr=(self.rr @ flat).reshape(shape),
            u_y=(self.y @ flat).reshape(shape),
            u_ry=(self.ry @ flat).reshape(shape),
            u_yy=(self.yy @ flat).reshape(shape),
        )


@dataclass
class OperatorResidual:
    """Residual samples on a grid with their norms over the interior mask."""

    field: np.ndarray
    mask: np.ndarray
    sup_norm: float
    l2_norm: float
    order_estimate: Optional[float] = None

    @classmethod
    def from_field(cls, values: np.ndarray, mask: np.ndarray) -> 'OperatorResidual':
        values = np.where(mask, values, 0.0)
        inside = values[mask]
        sup_norm = float(np.max(np.abs(inside))) if inside.size else 0.0
        l2_norm = float(np.sqrt(np.mean(inside * inside))) if inside.size else 0.0
        return cls(field=values, mask=mask, sup_norm=sup_norm, l2_norm=l2_norm)


def _require_positive(u: np.ndarray) -> None:
    if np.any(u <= 0) or not np.all(np.isfinite(u)):
        raise NonpositiveU(f'u must be positive and finite, min value {float(np.nanmin(u)):.3e}')


def laplacian(d: Derivatives, r: np.ndarray, axis: np.ndarray, params: ConeParams) -> np.ndarray:
    """u_rr + (n-1) u_r / r + u_yy with the axis limit (n-1) u_rr where r = 0."""
    with np.errstate(divide='ignore', invalid='ignore'):
        radial = np.where(axis, d.u_rr, d.u_r / np.where(axis, 1.0, r))
    return d.u_rr + (params.n - 1) * radial + d.u_yy


def q_pointwise(d: Derivatives) -> np.ndarray:
    """Q(u) = u_r^2 u_rr + u_y^2 u_yy + 2 u_r u_y u_ry."""
    return d.u_r * d.u_r * d.u_rr + d.u_y * d.u_y * d.u_yy + 2.0 * d.u_r * d.u_y * d.u_ry


def g_minimality_pointwise(
    d: Derivatives,
    r: np.ndarray,
    axis: np.ndarray,
    params: ConeParams,
    f: np.ndarray,
    f_r: np.ndarray,
    f_y: np.ndarray,
) -> np.ndarray:
    """Minimality of SG(u) in the metric with factor f; reduces to M(u) for f = 1, Df = 0."""
    grad2 = d.u_r * d.u_r + d.u_y * d.u_y
    weight = 1.0 + f * grad2
    transport = 0.5 * (params.m + 1.0 / weight) * (f_r * d.u_r + f_y * d.u_y)
    return transport + f * (laplacian(d, r, axis, params) - f * q_pointwise(d) / weight) - (params.m - 1) / d.u


def sme_pointwise(d: Derivatives, r: np.ndarray, params: ConeParams, axis: Optional[np.ndarray] = None) -> np.ndarray:
    """M(u) at arbitrary points from exact derivatives; nodes with r = 0 use the axis limit."""
    r = np.asarray(r, dtype=float)
    if axis is None:
        axis = r == 0.0
    shape = d.u.shape
    ones = np.ones(shape)
    zeros = np.zeros(shape)
    return g_minimality_pointwise(d, r, np.broadcast_to(axis, shape), params, ones, zeros, zeros)


def sme_residual(u: Grid2D, params: ConeParams) -> OperatorResidual:
    """Residual of M(u) on the grid.

    Raises:
        NonpositiveU: If some sample is not positive.
        GridTooCoarse: If the grid is smaller than 16x16.
    """
    _require_positive(u.values)
    ops = u.operators
    d = ops.apply(u.values)
    values = sme_pointwise(d, ops.radius, params, ops.axis)
    return OperatorResidual.from_field(values, u.interior_mask())


def roundoff_bound(u: Grid2D, params: ConeParams) -> np.ndarray:
    """Term-by-term magnitude of M(u) with every stencil replaced by its absolute value.

    Rounding errors of :func:`sme_residual` stay below a modest multiple of the machine epsilon times this
    bound, which grows like |u| / dr^2 where the cone is differenced far from the axis.
    """
    ops = u.operators
    flat = np.abs(u.values).ravel()
    stencil = {name: (abs(getattr(ops, name)) @ flat).reshape(ops.shape) for name in ('r', 'rr', 'ry', 'yy')}
    with np.errstate(divide='ignore', invalid='ignore'):
        radial = np.where(ops.axis, stencil['rr'], stencil['r'] / np.where(ops.axis, 1.0, ops.radius))
    # the quotient Q / (1 + |Du|^2) adds at most one more copy of each second derivative
    second = 2.0 * stencil['rr'] + 2.0 * stencil['yy'] + 2.0 * stencil['ry']
    return second + (params.n - 1) * radial + (params.m - 1) / np.abs(u.values)


def q_term(u: Grid2D) -> Grid2D:
    """Q(u) sampled with the stencils shared by :func:`sme_residual`."""
    d = u.operators.apply(u.values)
    return u.with_values(q_pointwise(d))


def g_minimality_residual(u: Grid2D, f: ConformalFactor, params: ConeParams) -> OperatorResidual:
    """Residual of the minimality equation of SG(u) in the metric with conformal factor f.

    Raises:
        NonpositiveU: If some sample is not positive.
        DomainMismatch: If f is not defined at every node.
    """
    _require_positive(u.values)
    ops = u.operators
    r, y = ops.radius, u.y_mesh
    if not np.all(f.covers(r, y)):
        raise DomainMismatch('The conformal factor does not cover the grid')
    f_val, f_r, f_y = f.evaluate(r, y)
    d = ops.apply(u.values)
    values = g_minimality_pointwise(d, r, ops.axis, params, f_val, f_r, f_y)
    return OperatorResidual.from_field(values, u.interior_mask())


def sphere_area(dim: int) -> float:
    """Area of the unit sphere in R^dim, 2 pi^(dim/2) / Gamma(dim/2)."""
    return 2.0 * math.pi**(dim / 2.0) / gamma_fn(dim / 2.0)


def _integrate_y(values: np.ndarray, grid: Grid2D) -> float:
    if grid.y_boundary == YBoundary.PERIODIC:
        return float(np.sum(values) * grid.d_y)
    return float(trapezoid(values, grid.y))


def weighted_area(u: Grid2D, f: Optional[ConformalFactor], params: ConeParams) -> float:
    """Integral of sqrt(1 + f |Du|^2) f^((m-1)/2) u^(m-1) r^(n-1) dr dy over the mapped domain.

    The area of the unit (m-1)-sphere is not included; see :func:`sphere_area`.
    """
    _require_positive(u.values)
    f = f or UnitFactor()
    r, y = u.r, u.y_mesh
    _, s1, _ = u.radial_map
    f_val, _, _ = f.evaluate(r, y)
    if u.shape[0] >= MIN_NODES and u.shape[1] >= MIN_NODES:
        d = u.operators.apply(u.values)
        grad2 = d.u_r**2 + d.u_y**2
    else:
        grad2 = (np.gradient(u.values, u.rho, axis=1) / (u.radius[:, None] * s1[None, :]))**2
    integrand = np.sqrt(1.0 + f_val * grad2) * f_val**((params.m - 1) / 2.0) * u.values**(params.m - 1)
    integrand = integrand * r**(params.n - 1)
    # dr = R(y) s'(rho) drho along each column
    columns = trapezoid(integrand * s1[None, :], u.rho, axis=1) * u.radius
    return _integrate_y(columns, u)


def _divergence(ops: DifferenceOperators, flux_r: np.ndarray, flux_y: np.ndarray, params: ConeParams) -> np.ndarray:
    dr = (ops.r @ flux_r.ravel()).reshape(ops.shape)
    dy = (ops.y @ flux_y.ravel()).reshape(ops.shape)
    r = ops.radius
    with np.errstate(divide='ignore', invalid='ignore'):
        radial = np.where(ops.axis, dr, flux_r / np.where(ops.axis, 1.0, r))
    return dr + (params.n - 1) * radial + dy


def difference_coefficients(d1: Derivatives, d2: Derivatives) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """a_ij = int_0^1 (delta_ij - p_i p_j / V_t^2) / V_t dt along p = D(u2 + t (u1 - u2)).

    Returns the (rr, ry, yy) entries computed with an 8-point Gauss-Legendre rule.
    """
    nodes, weights = leggauss(QUADRATURE_POINTS)
    nodes = 0.5 * (nodes + 1.0)
    weights = 0.5 * weights
    a_rr = np.zeros_like(d1.u)
    a_ry = np.zeros_like(d1.u)
    a_yy = np.zeros_like(d1.u)
    for t, wt in zip(nodes, weights):
        p_r = d2.u_r + t * (d1.u_r - d2.u_r)
        p_y = d2.u_y + t * (d1.u_y - d2.u_y)
        v2 = 1.0 + p_r * p_r + p_y * p_y
        v = np.sqrt(v2)
        a_rr += wt * (1.0 - p_r * p_r / v2) / v
        a_ry += wt * (-p_r * p_y / v2) / v
        a_yy += wt * (1.0 - p_y * p_y / v2) / v
    return a_rr, a_ry, a_yy


def difference_residual(u1: Grid2D, u2: Grid2D, params: ConeParams) -> OperatorResidual:
    """Residual of the linear equation satisfied by w = u1 - u2 when both fields solve M(u) = 0.

    The residual is D_i(a_ij D_j w) + b . Dw + (m-1) w / (V1 u1 u2) with
    b = (m-1) D(u1 + u2) / (u2 V1 V2 (V1 + V2)); it equals M0(u1) - M0(u2) with M0 = M / V.

    Raises:
        DomainMismatch: If the grids differ.
        NonpositiveU: If either field is not positive.
    """
    if not u1.same_layout(u2):
        raise DomainMismatch('difference_residual needs both fields on the same grid')
    _require_positive(u1.values)
    _require_positive(u2.values)
    ops = u1.operators
    d1 = ops.apply(u1.values)
    d2 = ops.apply(u2.values)
    w = u1.values - u2.values
    dw = ops.apply(w)

    a_rr, a_ry, a_yy = difference_coefficients(d1, d2)
    flux_r = a_rr * dw.u_r + a_ry * dw.u_y
    flux_y = a_ry * dw.u_r + a_yy * dw.u_y
    v1 = np.sqrt(1.0 + d1.u_r**2 + d1.u_y**2)
    v2 = np.sqrt(1.0 + d2.u_r**2 + d2.u_y**2)
    scale = (params.m - 1) / (u2.values * v1 * v2 * (v1 + v2))
    drift = scale * ((d1.u_r + d2.u_r) * dw.u_r + (d1.u_y + d2.u_y) * dw.u_y)
    zeroth = (params.m - 1) * w / (v1 * u1.values * u2.values)
    values = _divergence(ops, flux_r, flux_y, params) + drift + zeroth
    return OperatorResidual.from_field(values, u1.interior_mask())


def max_principle_margin(upper: np.ndarray, u: Grid2D) -> float:
    """Smallest value of upper - u over the interior nodes."""
    mask = u.interior_mask()
    return float(np.min((np.asarray(upper) - u.values)[mask]))


def estimate_order(errors: Sequence[float], ratio: float = 2.0) -> List[float]:
    """Observed convergence orders log(e_k / e_{k+1}) / log(ratio) of consecutive refinements."""
    errors = [float(e) for e in errors]
    return [math.log(a / b) / math.log(ratio) for a, b in zip(errors, errors[1:]) if a > 0 and b > 0]


def sme_jacobian(u: Grid2D, params: ConeParams) -> Tuple[np.ndarray, sp.csr_matrix]:
    """M(u) at every node and its exact Jacobian with respect to the nodal values.

    The Jacobian is the derivative of the discrete operator itself: each partial derivative of the pointwise
    formula multiplies the sparse stencil it was computed from, so Newton converges quadratically.
    """
    ops = u.operators
    d = ops.apply(u.values)
    values = sme_pointwise(d, ops.radius, params, ops.axis)
    weight = 1.0 + d.u_r**2 + d.u_y**2
    q = q_pointwise(d)
    n1 = params.n - 1
    with np.errstate(divide='ignore', invalid='ignore'):
        inv_r = np.where(ops.axis, 0.0, 1.0 / np.where(ops.axis, 1.0, ops.radius))
    c_rr = 1.0 - d.u_r**2 / weight + np.where(ops.axis, n1, 0.0)
    c_yy = 1.0 - d.u_y**2 / weight
    c_ry = -2.0 * d.u_r * d.u_y / weight
    c_r = n1 * inv_r - 2.0 * (d.u_r * d.u_rr + d.u_y * d.u_ry) / weight + 2.0 * q * d.u_r / weight**2
    c_y = -2.0 * (d.u_y * d.u_yy + d.u_r * d.u_ry) / weight + 2.0 * q * d.u_y / weight**2
    c_u = (params.m - 1) / d.u**2

    def diag(v):
        return sp.diags(np.ravel(v), format='csr')

    jac = (
        diag(c_rr) @ ops.rr + diag(c_yy) @ ops.yy + diag(c_ry) @ ops.ry + diag(c_r) @ ops.r + diag(c_y) @ ops.y
        + diag(c_u)
    )
    return values, jac.tocsr()


class GridSampler(FieldSampler):
    """Bicubic interpolation of a grid in its mapped coordinates.

    The spline is fitted to u - alpha0 r, mirrored across the axis and padded in y according to the boundary
    treatment, and the cone part is added back exactly. Derivatives follow from the chain rule of the map.
    """

    PAD = 3

    def __init__(self, grid: Grid2D, alpha0: float = 0.0,
                 radius_fn: Optional[Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray, np.ndarray]]] = None):
        self.grid = grid
        self.alpha0 = float(alpha0)
        excess = grid.values - self.alpha0 * grid.r
        rho, y = grid.rho, grid.y
        if grid.has_axis:
            rho = np.concatenate([-rho[:0:-1], rho])
            excess = np.concatenate([excess[:, :0:-1], excess], axis=1)
        y, excess, radius = self._pad_y(y, excess, grid.radius)
        self._spline = RectBivariateSpline(y, rho, excess, kx=3, ky=3, s=0)
        self._radius_spline = CubicSpline(y, radius)
        self._radius_fn = radius_fn

    def _pad_y(self, y: np.ndarray, excess: np.ndarray, radius: np.ndarray):
        k = self.PAD
        if self.grid.y_boundary == YBoundary.PERIODIC:
            q = self.grid.period
            y = np.concatenate([y[-k:] - q, y, y[:k] + q])
            excess = np.concatenate([excess[-k:], excess, excess[:k]])
            radius = np.concatenate([radius[-k:], radius, radius[:k]])
        elif self.grid.y_boundary == YBoundary.REFLECT:
            y = np.concatenate([2 * y[0] - y[k:0:-1], y, 2 * y[-1] - y[-2:-k - 2:-1]])
            excess = np.concatenate([excess[k:0:-1], excess, excess[-2:-k - 2:-1]])
            radius = np.concatenate([radius[k:0:-1], radius, radius[-2:-k - 2:-1]])
        return y, excess, radius

    def wrap(self, y: np.ndarray) -> np.ndarray:
        if self.grid.y_boundary != YBoundary.PERIODIC:
            return y
        y0, q = self.grid.y[0], self.grid.period
        return y0 + np.mod(y - y0, q)

    def column_radius(self, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self._radius_fn is not None:
            return self._radius_fn(y)
        spline = self._radius_spline
        return spline(y), spline(y, 1), spline(y, 2)

    def derivatives(self, r, y) -> Derivatives:
        r, y = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(y, dtype=float))
        shape = r.shape
        r = r.ravel()
        y = self.wrap(y.ravel())
        R, R1, R2 = self.column_radius(y)
        x = r / R
        if np.any(x > 1.0 + 1e-9) or np.any(x < 0):
            raise OutsideWindow('Sample points leave the columns of the grid')
        rho = inverse_radial_map(np.clip(x, 0.0, 1.0), self.grid.stretch)
        ev = self._spline.ev
        c = chain_coefficients(rho, R, R1, R2, self.grid.stretch)
        d = _apply_chain(
            c,
            ev(y, rho),
            ev(y, rho, dy=1),
            ev(y, rho, dy=2),
            ev(y, rho, dx=1),
            ev(y, rho, dx=1, dy=1),
            ev(y, rho, dx=2),
        )
        axis = r == 0.0
        d = d._replace(u=d.u + self.alpha0 * r, u_r=np.where(axis, 0.0, d.u_r) + self.alpha0)
        return Derivatives(*(np.reshape(v, shape) for v in d))


def save_grid(grid: Grid2D, path: str, extra: Optional[dict] = None) -> List[str]:
    """Write the grid as a long (rho, y, r, value) CSV and a JSON sidecar with the column data."""
    rho, y, value = grid_columns(grid.rho, grid.y, grid.values)
    write_csv(path, {'rho': rho, 'y': y, 'r': grid.r.ravel(), 'value': value})
    meta = {
        'shape': list(grid.shape),
        'radius': grid.radius,
        'radius_dy': grid.radius_dy,
        'radius_dyy': grid.radius_dyy,
        'y_boundary': grid.y_boundary.value,
        'period': grid.period,
        'stretch': grid.stretch,
        'envelope': grid.envelope_ref,
    }
    meta.update(extra or {})
    sidecar = write_json(os.path.splitext(path)[0] + '.json', meta)
    return [path, sidecar]


def load_grid(path: str) -> Grid2D:
    columns = read_csv(path)
    meta = read_json(os.path.splitext(path)[0] + '.json')
    n_y, n_rho = meta['shape']
    return Grid2D(
        rho=columns['rho'][:n_rho],
        y=columns['y'][::n_rho],
        values=columns['value'].reshape(n_y, n_rho),
        radius=np.asarray(meta['radius']),
        radius_dy=np.asarray(meta['radius_dy']),
        radius_dyy=np.asarray(meta['radius_dyy']),
        y_boundary=YBoundary(meta['y_boundary']),
        period=meta['period'],
        stretch=meta['stretch'],
        envelope_ref=meta.get('envelope') or {},
    )
