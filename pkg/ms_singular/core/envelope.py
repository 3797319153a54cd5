"""Envelope of a closed set K and the supersolution family built on it.

The envelope is h(y) = tau0 * exp(-1 / d(y)) where d is the distance to K, mollified inside every gap of K so
that h is smooth where the raw distance has a kink. Near K the distance is left untouched, so h vanishes to
infinite order exactly on K. The regularized quantities used by the boundary value problems are

    h_eps(y) = (eps^(1/4) + h(y))^2,      psi_{t,tau,eps}(y) = t + tau * exp(-1 / (eps^(1/4) + h(y))),

and the supersolution is S(r, y) = psi(y) * phi~(r / psi(y)) built on the modified radial profile.
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import Polynomial
from scipy.integrate import cumulative_trapezoid, trapezoid

from ..errors import BoundViolation, EmptyK, GridTooCoarse, InvalidParameter
from ..model import ClosedSetKind, ClosedSetSpec, ProfileVariant, SignReport, YBoundary
from ..utils import get_logger, write_csv
from .radial_ode import ArrayLike, RadialProfile, eval_scaled_excess
from .sme_operator import Derivatives, FieldSampler, Grid2D, roundoff_bound, sample_field, sme_residual

logger = get_logger()

BUMP_TABLE_NODES = 4001
DEFAULT_GAP_FRACTION = 0.4
PROBE_UNIFORM = 2001
PROBE_PER_ENDPOINT = 12
FLATNESS_ORDER = 4
FLATNESS_DELTA_MAX = 0.05
FLATNESS_CLOSED_FORM_TOL = 1e-8
MIN_SUPERSOLUTION_NODES = 32
MAX_SUPERSOLUTION_NODES = 4097
SUPERSOLUTION_N_Y = 32
# radial spacings across the tip psi once it is resolved, and the psi / dr ratio that triggers refinement
CORE_NODES = 32
CORE_TRIGGER = 0.25
ROUNDOFF_FACTOR = 64.0
# h + |h'| + |h''| < BOUND_FACTOR * tau0; an isolated point of K alone reaches point_bound_ratio() * tau0
BOUND_FACTOR = 4.0

Interval = Tuple[float, float]


class ClosedSetFactory:
    """Registry of builders turning a :class:`ClosedSetSpec` into raw intervals."""

    _builders: Dict[ClosedSetKind, Callable[[ClosedSetSpec], List[Interval]]] = {}

    @classmethod
    def register_builder(cls, kind: ClosedSetKind, builder: Callable[[ClosedSetSpec], List[Interval]]):
        cls._builders[kind] = builder

    @classmethod
    def create_intervals(cls, spec: ClosedSetSpec) -> List[Interval]:
        kind = ClosedSetKind(spec.kind)
        if kind not in cls._builders:
            raise InvalidParameter(f'Closed set kind {kind} is not registered')
        return cls._builders[kind](spec)

    @classmethod
    def get_available_kinds(cls) -> List[ClosedSetKind]:
        return list(cls._builders.keys())


def register_closed_set(kind: ClosedSetKind):

    def decorator(builder: Callable[[ClosedSetSpec], List[Interval]]):
        ClosedSetFactory.register_builder(kind, builder)
        return builder

    return decorator


@register_closed_set(ClosedSetKind.FINITE_POINTS)
def _finite_points(spec: ClosedSetSpec) -> List[Interval]:
    return [(float(p), float(p)) for p in spec.points]


@register_closed_set(ClosedSetKind.INTERVAL_UNION)
def _interval_union(spec: ClosedSetSpec) -> List[Interval]:
    return [(float(a), float(b)) for a, b in spec.intervals]


@register_closed_set(ClosedSetKind.CANTOR_LIKE)
def _cantor_like(spec: ClosedSetSpec) -> List[Interval]:
    """Generation ``depth`` of the symmetric Cantor construction on ``base_interval``."""
    a, b = spec.base_interval
    if b <= a:
        raise InvalidParameter(f'Cantor base interval must have positive length, got [{a}, {b}]')
    intervals = [(float(a), float(b))]
    for _ in range(spec.depth):
        refined = []
        for lo, hi in intervals:
            keep = spec.ratio * (hi - lo)
            refined.append((lo, lo + keep))
            refined.append((hi - keep, hi))
        intervals = refined
    return intervals


def normalize_components(intervals: Sequence[Interval]) -> np.ndarray:
    """Sort intervals and merge the overlapping ones into disjoint components, shape (k, 2)."""
    if len(intervals) == 0:
        raise EmptyK('The closed set K must not be empty')
    ordered = sorted((float(a), float(b)) for a, b in intervals)
    merged = [list(ordered[0])]
    for a, b in ordered[1:]:
        if a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return np.asarray(merged, dtype=float)


def component_intervals(spec: ClosedSetSpec) -> np.ndarray:
    return normalize_components(ClosedSetFactory.create_intervals(spec))


class _BumpTable:
    """Normalized bump rho(t) ~ exp(-1 / (1 - t^2)) on [-1, 1], its CDF F and partial first moment G.

    G is shifted so that G(1) = 0. Convolving |x| with the bump at scale s then gives
    x (2 F(x/s) - 1) - 2 s G(x/s) for |x| < s and |x| elsewhere.
    """

    def __init__(self, nodes: int = BUMP_TABLE_NODES):
        t = np.linspace(-1.0, 1.0, nodes)
        raw = self._raw(t)
        self.mass = float(trapezoid(raw, t))
        density = raw / self.mass
        cdf = cumulative_trapezoid(density, t, initial=0.0)
        moment = cumulative_trapezoid(t * density, t, initial=0.0)
        self.t = t
        self.cdf = cdf / cdf[-1]
        self.moment = moment - moment[-1]

    @staticmethod
    def _raw(t: np.ndarray) -> np.ndarray:
        inside = np.abs(t) < 1.0
        out = np.zeros_like(t)
        out[inside] = np.exp(-1.0 / (1.0 - t[inside]**2))
        return out

    def density(self, u: np.ndarray) -> np.ndarray:
        return self._raw(u) / self.mass

    def smooth_abs(self, x: np.ndarray, s: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """|x| mollified at scale s with its first two derivatives."""
        value = np.abs(x)
        d1 = np.sign(x)
        d2 = np.zeros_like(x)
        u = x / s
        near = np.abs(u) < 1.0
        if np.any(near):
            un, xn, sn = u[near], x[near], s[near]
            cdf = np.interp(un, self.t, self.cdf)
            value[near] = xn * (2.0 * cdf - 1.0) - 2.0 * sn * np.interp(un, self.t, self.moment)
            d1[near] = 2.0 * cdf - 1.0
            d2[near] = 2.0 * self.density(un) / sn
        return value, d1, d2


_BUMP = _BumpTable()


class SmoothCutoff:
    """zeta(t) = 1 for t <= 1/2, 0 for t >= 1, smooth and decreasing in between, with exact derivatives."""

    def evaluate(self, t: ArrayLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = np.asarray(t, dtype=float)
        z = np.where(t <= 0.5, 1.0, 0.0)
        z1 = np.zeros_like(z)
        z2 = np.zeros_like(z)
        mid = (t > 0.5) & (t < 1.0)
        if np.any(mid):
            a = 1.0 - t[mid]
            b = t[mid] - 0.5
            A = np.exp(-1.0 / a)
            B = np.exp(-1.0 / b)
            A1 = -A / a**2
            B1 = B / b**2
            A2 = A * (1.0 / a**4 - 2.0 / a**3)
            B2 = B * (1.0 / b**4 - 2.0 / b**3)
            S = A + B
            cross = A1 * B - A * B1
            z[mid] = A / S
            z1[mid] = cross / S**2
            z2[mid] = ((A2 * B - A * B2) * S - 2.0 * cross * (A1 + B1)) / S**3
        return z, z1, z2

    def __call__(self, t: ArrayLike) -> np.ndarray:
        return self.evaluate(t)[0]


class Envelope(ABC):
    """Common interface of the plain and the periodized envelope."""

    tau0: float

    @abstractmethod
    def evaluate(self, y: ArrayLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (h, h', h'') at y."""
        pass

    @abstractmethod
    def in_k(self, y: ArrayLike) -> np.ndarray:
        """Boolean mask of the points of K."""
        pass

    @abstractmethod
    def distance(self, y: ArrayLike) -> np.ndarray:
        """Raw distance to K."""
        pass

    @property
    @abstractmethod
    def window(self) -> Tuple[float, float]:
        """The y range probed by checks and exports."""
        pass

    @abstractmethod
    def probe_points(self) -> np.ndarray:
        pass

    @abstractmethod
    def to_dict(self) -> dict:
        pass

    def h(self, y: ArrayLike) -> np.ndarray:
        return self.evaluate(y)[0]

    def h_squared(self, y: ArrayLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """h^2 with derivatives; the outer radius of the working domain {r < h^2}."""
        h, h1, h2 = self.evaluate(y)
        return h * h, 2.0 * h * h1, 2.0 * h1 * h1 + 2.0 * h * h2

    def h_eps(self, y: ArrayLike, eps: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(eps^(1/4) + h)^2 with derivatives; the column radius of the regularized domain."""
        h, h1, h2 = self.evaluate(y)
        w = eps**0.25 + h
        return w * w, 2.0 * w * h1, 2.0 * h1 * h1 + 2.0 * w * h2

    def psi(self, y: ArrayLike, t: float, tau: float, eps: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """t + tau exp(-1 / (eps^(1/4) + h)) with derivatives."""
        h, h1, h2 = self.evaluate(y)
        w = eps**0.25 + h
        e = tau * np.exp(-1.0 / w)
        e1 = e * h1 / w**2
        e2 = e * (h2 / w**2 + h1 * h1 * (1.0 / w**4 - 2.0 / w**3))
        return t + e, e1, e2

    def psi_limit(self, y: ArrayLike, tau: float) -> np.ndarray:
        """tau exp(-1 / h), the eps -> 0 limit of psi at t = 0; zero on K."""
        h = np.asarray(self.h(y), dtype=float)
        out = np.zeros_like(h)
        pos = h > 0
        out[pos] = tau * np.exp(-1.0 / h[pos])
        return out


@dataclass
class EnvelopeFn(Envelope):
    """h(y) = tau0 exp(-1 / d~(y)) for a closed set K given as disjoint components.

    ``gap_scales[i]`` is the mollification half width used inside the gap between components i and i + 1.
    """

    spec: ClosedSetSpec
    components: np.ndarray
    tau0: float
    smoothing_scale: Optional[float]
    gap_scales: np.ndarray
    bound_value: float = float('nan')
    metadata: dict = field(default_factory=dict)

    @property
    def window(self) -> Tuple[float, float]:
        lo, hi = float(self.components[0, 0]), float(self.components[-1, 1])
        margin = max(1.0, 0.5 * (hi - lo))
        return lo - margin, hi + margin

    @property
    def endpoints(self) -> np.ndarray:
        return np.unique(self.components.ravel())

    def _locate(self, y: np.ndarray):
        starts = self.components[:, 0]
        ends = self.components[:, 1]
        left = np.searchsorted(starts, y, side='right') - 1
        safe = np.clip(left, 0, len(starts) - 1)
        inside = (left >= 0) & (y <= ends[safe])
        before = left < 0
        after = (left == len(starts) - 1) & ~inside
        gap = ~(inside | before | after)
        return left, inside, before, after, gap

    def in_k(self, y: ArrayLike) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return self._locate(y)[1]

    def distance(self, y: ArrayLike) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        flat = y.reshape(-1, 1)
        below = np.clip(self.components[None, :, 0] - flat, 0.0, None)
        above = np.clip(flat - self.components[None, :, 1], 0.0, None)
        return np.min(below + above, axis=1).reshape(y.shape)

    def smoothed_distance(self, y: ArrayLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Mollified distance d~ with its first two derivatives; d~ = d outside the mollified gap centers."""
        y = np.asarray(y, dtype=float)
        shape = y.shape
        y = y.ravel()
        d = np.zeros_like(y)
        d1 = np.zeros_like(y)
        d2 = np.zeros_like(y)
        left, _, before, after, gap = self._locate(y)
        starts = self.components[:, 0]
        ends = self.components[:, 1]

        d[before] = starts[0] - y[before]
        d1[before] = -1.0
        d[after] = y[after] - ends[-1]
        d1[after] = 1.0
        if np.any(gap):
            k = left[gap]
            width = starts[k + 1] - ends[k]
            mid = 0.5 * (starts[k + 1] + ends[k])
            value, a1, a2 = _BUMP.smooth_abs(y[gap] - mid, self.gap_scales[k])
            d[gap] = 0.5 * width - value
            d1[gap] = -a1
            d2[gap] = -a2
        return d.reshape(shape), d1.reshape(shape), d2.reshape(shape)

    def evaluate(self, y: ArrayLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        d, d1, d2 = self.smoothed_distance(y)
        h = np.zeros_like(d)
        h1 = np.zeros_like(d)
        h2 = np.zeros_like(d)
        pos = d > 0
        if np.any(pos):
            dp, d1p, d2p = d[pos], d1[pos], d2[pos]
            hp = self.tau0 * np.exp(-1.0 / dp)
            slope = d1p / dp**2
            h[pos] = hp
            h1[pos] = hp * slope
            h2[pos] = hp * (slope * slope + d2p / dp**2 - 2.0 * d1p * d1p / dp**3)
        return h, h1, h2

    def probe_points(self, count: int = PROBE_UNIFORM, per_endpoint: int = PROBE_PER_ENDPOINT) -> np.ndarray:
        """Uniform coverage of the window plus geometric sequences approaching every endpoint of K from outside."""
        lo, hi = self.window
        points = [np.linspace(lo, hi, count)]
        offsets = np.geomspace(1e-1, 1e-4, per_endpoint)
        for a, b in self.components:
            points.append(a - offsets)
            points.append(b + offsets)
        y = np.unique(np.concatenate(points))
        y = y[(y >= lo) & (y <= hi)]
        return y[~self.in_k(y) | np.isin(y, self.endpoints)]

    def free_length(self, endpoint_index: int, side: int) -> float:
        """Distance from a component end into its neighbouring gap over which d~ equals the raw distance."""
        k = endpoint_index
        if side < 0:
            if k == 0:
                return math.inf
            width = self.components[k, 0] - self.components[k - 1, 1]
            return 0.5 * width - float(self.gap_scales[k - 1])
        if k == len(self.components) - 1:
            return math.inf
        width = self.components[k + 1, 0] - self.components[k, 1]
        return 0.5 * width - float(self.gap_scales[k])

    def to_dict(self) -> dict:
        return {
            'kind': ClosedSetKind(self.spec.kind).value,
            'components': self.components.tolist(),
            'tau0': self.tau0,
            'smoothing_scale': self.smoothing_scale,
            'gap_scales': self.gap_scales.tolist(),
            'bound_value': self.bound_value,
        }


@dataclass
class PeriodicEnvelope(Envelope):
    """zeta(2|y|/q) h(y) on the cell [-q/2, q/2), repeated with period q."""

    base: EnvelopeFn
    period: float
    cutoff: SmoothCutoff = field(default_factory=SmoothCutoff)

    def __post_init__(self):
        if self.period <= 0:
            raise InvalidParameter(f'Period must be positive, got {self.period}')
        lo, hi = float(self.base.components[0, 0]), float(self.base.components[-1, 1])
        if max(abs(lo), abs(hi)) >= 0.25 * self.period:
            logger.warning_once(
                'K spans [%g, %g], beyond the plateau |y| < q/4 = %g of the periodization', lo, hi, 0.25 * self.period
            )

    @property
    def tau0(self) -> float:
        return self.base.tau0

    @property
    def window(self) -> Tuple[float, float]:
        return -0.5 * self.period, 0.5 * self.period

    def cell_coordinate(self, y: ArrayLike) -> np.ndarray:
        q = self.period
        return np.mod(np.asarray(y, dtype=float) + 0.5 * q, q) - 0.5 * q

    def evaluate(self, y: ArrayLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        yc = self.cell_coordinate(y)
        scale = 2.0 / self.period
        z, z1, z2 = self.cutoff.evaluate(scale * np.abs(yc))
        sign = np.sign(yc)
        h, h1, h2 = self.base.evaluate(yc)
        value = z * h
        d1 = scale * sign * z1 * h + z * h1
        d2 = scale * scale * z2 * h + 2.0 * scale * sign * z1 * h1 + z * h2
        return value, d1, d2

    def in_k(self, y: ArrayLike) -> np.ndarray:
        return self.base.in_k(self.cell_coordinate(y))

    def distance(self, y: ArrayLike) -> np.ndarray:
        return self.base.distance(self.cell_coordinate(y))

    def probe_points(self) -> np.ndarray:
        lo, hi = self.window
        y = self.base.probe_points()
        y = y[(y >= lo) & (y < hi)]
        return np.unique(np.concatenate([y, np.linspace(lo, hi, PROBE_UNIFORM, endpoint=False)]))

    def to_dict(self) -> dict:
        payload = self.base.to_dict()
        payload['period'] = self.period
        return payload


def _gap_scales(components: np.ndarray, smoothing_scale: Optional[float]) -> np.ndarray:
    gaps = components[1:, 0] - components[:-1, 1]
    if smoothing_scale is None:
        return DEFAULT_GAP_FRACTION * gaps
    scales = np.minimum(float(smoothing_scale), 0.5 * gaps)
    if np.any(scales < smoothing_scale):
        logger.warning_once(
            'Smoothing scale %g clamped to half the gap width in %d of %d gaps', smoothing_scale,
            int(np.count_nonzero(scales < smoothing_scale)), gaps.size
        )
    return scales


def point_bound_ratio() -> float:
    """sup over d > 0 of (h + |h'| + |h''|) / tau0 for h = tau0 exp(-1 / d), about 2.77 near d = 0.22."""
    x = np.linspace(1e-3, 40.0, 40001)
    return float(np.max(np.exp(-x) * (1.0 + x * x + np.abs(x**4 - 2.0 * x**3))))


def envelope_bound(env: Envelope, y: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """Largest value of h + |h'| + |h''| over the probe points and where it occurs."""
    y = env.probe_points() if y is None else np.asarray(y, dtype=float)
    h, h1, h2 = env.evaluate(y)
    total = h + np.abs(h1) + np.abs(h2)
    idx = int(np.argmax(total))
    return float(total[idx]), float(y[idx])


def build_envelope(
    spec: ClosedSetSpec,
    tau0: float,
    smoothing_scale: Optional[float] = None,
    bound_factor: float = BOUND_FACTOR,
) -> EnvelopeFn:
    """Build h from a closed set and verify its derivative bound on the probe set.

    Args:
        spec: The closed set K.
        tau0: Scale of h, in (0, 1/4].
        smoothing_scale: Mollification half width inside the gaps of K. ``None`` uses 0.4 times each gap,
            a larger value is clamped to half the gap.
        bound_factor: The check is h + |h'| + |h''| < bound_factor * tau0. An isolated
            point of K already reaches :func:`point_bound_ratio` times tau0.

    Raises:
        EmptyK: If K has no points.
        InvalidParameter: For tau0 or smoothing_scale out of range.
        BoundViolation: If the derivative bound fails at some probe point.
    """
    if not 0 < tau0 <= 0.25:
        raise InvalidParameter(f'tau0 must lie in (0, 1/4], got {tau0}')
    if smoothing_scale is not None and smoothing_scale <= 0:
        raise InvalidParameter(f'smoothing_scale must be positive, got {smoothing_scale}')
    components = component_intervals(spec)
    env = EnvelopeFn(
        spec=spec,
        components=components,
        tau0=float(tau0),
        smoothing_scale=smoothing_scale,
        gap_scales=_gap_scales(components, smoothing_scale),
    )
    value, where = envelope_bound(env)
    env.bound_value = value
    if bound_factor <= point_bound_ratio():
        logger.warning_once(
            'bound_factor=%g is below %.4g, the bound at an isolated point of K', bound_factor, point_bound_ratio()
        )
    if value >= bound_factor * tau0:
        raise BoundViolation(
            f'h + |Dh| + |D^2h| = {value:.4g} at y = {where:.4g} exceeds {bound_factor:g} * tau0 = '
            f'{bound_factor * tau0:.4g}; shrink tau0 or increase the smoothing scale'
        )
    logger.info(
        'Built envelope over %d component(s) of K, tau0=%g, sup(h + |Dh| + |D^2h|) = %.3g tau0', len(components),
        tau0, value / tau0
    )
    return env


def build_periodic_envelope(env: EnvelopeFn, period: float) -> PeriodicEnvelope:
    return PeriodicEnvelope(base=env, period=float(period))


def flatness_polynomials(order: int = FLATNESS_ORDER) -> List[Polynomial]:
    """P_k with d^k/dd^k exp(-1/d) = exp(-x) P_k(x) (d')^k, x = 1/d, for linear d."""
    polys = [Polynomial([1.0])]
    x2 = Polynomial([0.0, 0.0, 1.0])
    for _ in range(order):
        p = polys[-1]
        polys.append(x2 * (p - p.deriv()))
    return polys


@dataclass
class FlatnessTable:
    """Normalized values dist^-j |D^k h| / tau0 on sequences approaching the endpoints of K."""

    rows: List[Dict[str, float]]
    passed: bool
    worst: float
    closed_form_error: float = 0.0


def flatness_report(env: EnvelopeFn, order: int = FLATNESS_ORDER, samples: int = 6) -> FlatnessTable:
    """Tabulate the flatness of h near every endpoint of K for j <= ``order`` and the derivatives k <= 2.

    h, h' and h'' come from :meth:`EnvelopeFn.evaluate` at geometric distances inside the region where d~
    equals the raw distance. A side passes when every normalized sequence decreases as the probes approach K;
    the table passes when, in addition, the evaluated derivatives match exp(-x) P_k(x), x = 1 / dist, from
    :func:`flatness_polynomials` to ``FLATNESS_CLOSED_FORM_TOL``.
    """
    polys = flatness_polynomials(2)
    rows: List[Dict[str, float]] = []
    passed = True
    worst = 0.0
    closed_form_error = 0.0
    for k_comp, (a, b) in enumerate(env.components):
        for endpoint, side in ((a, -1), (b, 1)):
            delta_max = min(FLATNESS_DELTA_MAX, 0.5 * env.free_length(k_comp, side))
            if delta_max <= 0:
                continue
            deltas = np.geomspace(delta_max, 0.1 * delta_max, samples)
            x = 1.0 / deltas
            for k, derivative in enumerate(env.evaluate(endpoint + side * deltas)):
                magnitude = np.abs(derivative) / env.tau0
                closed = np.exp(-x) * np.abs(polys[k](x))
                closed_form_error = max(closed_form_error, float(np.max(np.abs(magnitude - closed) / closed)))
                for j in range(order + 1):
                    values = deltas**(-j) * magnitude
                    passed &= bool(np.all(np.diff(values) <= 0.0))
                    worst = max(worst, float(values[0]))
                    for delta, value in zip(deltas, values):
                        rows.append({
                            'endpoint': float(endpoint),
                            'side': float(side),
                            'delta': float(delta),
                            'j': float(j),
                            'k': float(k),
                            'value': float(value),
                        })
    passed &= closed_form_error <= FLATNESS_CLOSED_FORM_TOL
    if closed_form_error > FLATNESS_CLOSED_FORM_TOL:
        logger.warning('Envelope derivatives deviate from their closed forms by %.3e', closed_form_error)
    return FlatnessTable(rows=rows, passed=passed, worst=worst, closed_form_error=closed_form_error)


def save_envelope_probes(env: Envelope, path: str, y: Optional[np.ndarray] = None) -> str:
    """Write h, its derivatives and the raw distance at the probe points as CSV."""
    y = env.probe_points() if y is None else np.asarray(y, dtype=float)
    h, h1, h2 = env.evaluate(y)
    return write_csv(path, {'y': y, 'dist': env.distance(y), 'h': h, 'dh': h1, 'd2h': h2})


@dataclass(frozen=True)
class SupersolutionParams:
    """Parameters (t, tau, eps) of S_{t,tau,eps}."""

    t: float
    tau: float
    eps: float

    def __post_init__(self):
        if self.t < 0:
            raise InvalidParameter(f't must be non-negative, got {self.t}')
        if self.tau <= 0 or self.eps <= 0:
            raise InvalidParameter(f'tau and eps must be positive, got tau={self.tau}, eps={self.eps}')


def _require_modified(profile: RadialProfile) -> None:
    if profile.variant != ProfileVariant.MODIFIED:
        raise InvalidParameter('The supersolution needs the modified radial profile')


class SupersolutionField(FieldSampler):
    """S(r, y) = psi(y) phi~(r / psi(y)) with exact derivatives.

    With sigma = r / psi and Phi~ = phi~ - sigma phi~' the derivatives are s_r = phi~'(sigma),
    s_rr = phi~''/psi, s_y = psi' Phi~, s_ry = -psi' sigma phi~'' / psi and
    s_yy = psi'' Phi~ + psi'^2 sigma^2 phi~'' / psi.
    """

    def __init__(self, env: Envelope, params: SupersolutionParams, profile: RadialProfile):
        _require_modified(profile)
        self.env = env
        self.params = params
        self.profile = profile

    def scale(self, y: ArrayLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        p = self.params
        return self.env.psi(y, p.t, p.tau, p.eps)

    def excess(self, r: ArrayLike, y: ArrayLike) -> np.ndarray:
        """S - alpha0 r, free of cancellation."""
        psi, _, _ = self.scale(y)
        return eval_scaled_excess(self.profile, psi, r)[0]

    def derivatives(self, r: ArrayLike, y: ArrayLike) -> Derivatives:
        r, y = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(y, dtype=float))
        psi, psi1, psi2 = self.scale(y)
        w, dw, d2w_scaled = eval_scaled_excess(self.profile, psi, r)
        alpha0 = self.profile.alpha0
        big_phi = (w - r * dw) / psi
        return Derivatives(
            u=alpha0 * r + w,
            u_r=alpha0 + dw,
            u_rr=d2w_scaled,
            u_y=psi1 * big_phi,
            u_ry=-psi1 * r * d2w_scaled / psi,
            u_yy=psi2 * big_phi + psi1 * psi1 * r * r * d2w_scaled / (psi * psi),
        )

    def operator_values(self, r: ArrayLike, y: ArrayLike) -> np.ndarray:
        """M(S) from the reduced form that uses the radial equation of phi~.

        The first order radial terms cancel against the equation of phi~ and leave

            D M(S) = s_rr (s_r^2 s_y^2 - eta D) / (1 + s_r^2) + s_yy (1 + s_r^2) - 2 s_r s_y s_ry,

        with D = 1 + s_r^2 + s_y^2. No 1/r term remains, so the axis needs no special treatment.
        """
        d = self.derivatives(r, y)
        eta = self.profile.params.eta
        p2 = d.u_r * d.u_r
        q2 = d.u_y * d.u_y
        big_d = 1.0 + p2 + q2
        numerator = d.u_rr * (p2 * q2 - eta * big_d) / (1.0 + p2) + d.u_yy * (1.0 + p2) - 2.0 * d.u_r * d.u_y * d.u_ry
        return numerator / big_d


def supersolution_eval(env: Envelope, p: SupersolutionParams, mod_profile: RadialProfile, r: ArrayLike,
                       y: ArrayLike) -> np.ndarray:
    """S_{t,tau,eps}(r, y) = psi(y) phi~(r / psi(y))."""
    return SupersolutionField(env, p, mod_profile).values(r, y)


def _supersolution_nodes(env: Envelope, p: SupersolutionParams, y: np.ndarray,
                         n_rho: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per column: uniform nodes on [0, h_eps] and geometric nodes from psi / 100 up to h_eps."""
    radius, _, _ = env.h_eps(y, p.eps)
    psi, _, _ = env.psi(y, p.t, p.tau, p.eps)
    n_geo = n_rho // 2
    uniform = radius[:, None] * np.linspace(0.0, 1.0, n_rho - n_geo)[None, :]
    lo = np.minimum(1e-2 * psi, 0.5 * radius)
    geometric = lo[:, None] * (radius / lo)[:, None]**np.linspace(0.0, 1.0, n_geo)[None, :]
    r = np.concatenate([uniform, geometric], axis=1)
    return r, np.broadcast_to(y[:, None], r.shape)


def supersolution_grid(
    env: Envelope,
    p: SupersolutionParams,
    mod_profile: RadialProfile,
    n_rho: int = 64,
    n_y: int = SUPERSOLUTION_N_Y,
) -> Grid2D:
    """S_{t,tau,eps} sampled on columns of constant radius max_y h_eps(y) with uniform radial nodes.

    r is linear in rho and the column radius does not depend on y, so the difference stencils reproduce the
    cone alpha0 r exactly. Unless the tip psi is far below one spacing, the radial count is raised until psi
    spans ``CORE_NODES`` spacings, capped at ``MAX_SUPERSOLUTION_NODES``.
    """
    lo, hi = env.window
    if isinstance(env, PeriodicEnvelope):
        y = lo + (hi - lo) * np.arange(n_y) / n_y
        boundary, period = YBoundary.PERIODIC, env.period
    else:
        y = np.linspace(lo, hi, n_y)
        boundary, period = YBoundary.ONE_SIDED, None
    radius = float(np.max(env.h_eps(y, p.eps)[0]))
    psi_min = float(np.min(env.psi(y, p.t, p.tau, p.eps)[0]))
    if psi_min > CORE_TRIGGER * radius / (n_rho - 1):
        needed = int(math.ceil(CORE_NODES * radius / psi_min)) + 1
        if needed > MAX_SUPERSOLUTION_NODES:
            logger.warning('Tip psi=%.3e needs %d radial nodes; using %d', psi_min, needed, MAX_SUPERSOLUTION_NODES)
        n_rho = max(n_rho, min(needed, MAX_SUPERSOLUTION_NODES))
    zeros = np.zeros(n_y)
    return sample_field(
        SupersolutionField(env, p, mod_profile),
        np.linspace(0.0, 1.0, n_rho),
        y,
        np.full(n_y, radius),
        zeros,
        zeros,
        y_boundary=boundary,
        period=period,
    )


def verify_supersolution(
    env: Envelope,
    p: SupersolutionParams,
    mod_profile: RadialProfile,
    n_rho: int = 64,
    y: Optional[np.ndarray] = None,
    n_y: int = SUPERSOLUTION_N_Y,
) -> SignReport:
    """Certify M(S_{t,tau,eps}) < 0 on the regularized domain {r <= h_eps(y)}.

    S is sampled by :func:`supersolution_grid` and M(S) is the discrete :func:`sme_residual` on that grid.
    A node counts as negative when M(S) stays below ``ROUNDOFF_FACTOR`` machine epsilons of the
    :func:`roundoff_bound`; far from the tip M(S) is smaller than the rounding error of the cone's stencils.
    The reduced form of :meth:`SupersolutionField.operator_values` at exact derivatives on geometric nodes over
    ``y`` (the probe points by default) is recorded as a cross check.

    Raises:
        GridTooCoarse: If fewer than 32 radial nodes per column are requested.
    """
    if n_rho < MIN_SUPERSOLUTION_NODES:
        raise GridTooCoarse(f'The supersolution check needs at least {MIN_SUPERSOLUTION_NODES} radial nodes')
    if p.tau > env.tau0 or p.eps > env.tau0:
        logger.warning_once('tau=%g, eps=%g exceed tau0=%g; the sign certificate is report-only', p.tau, p.eps,
                            env.tau0)
    params = mod_profile.params
    grid = supersolution_grid(env, p, mod_profile, n_rho, n_y)
    r, yy = grid.r, grid.y_mesh
    mask = grid.interior_mask() & (r <= env.h_eps(grid.y, p.eps)[0][:, None])
    values = sme_residual(grid, params).field
    floor = ROUNDOFF_FACTOR * np.finfo(float).eps * roundoff_bound(grid, params)
    above = np.where(mask, values - floor, -np.inf)
    idx = np.unravel_index(int(np.argmax(above)), above.shape)
    max_value = float(above[idx])

    field_ = SupersolutionField(env, p, mod_profile)
    y = env.probe_points() if y is None else np.asarray(y, dtype=float)
    r_check, y_check = _supersolution_nodes(env, p, y, n_rho)
    cross_check = float(np.max(field_.operator_values(r_check, y_check)))
    if cross_check >= 0:
        logger.warning('Reduced form of M(S) reaches %.3e for t=%g tau=%g eps=%g', cross_check, p.t, p.tau, p.eps)

    report = SignReport(
        max_value=max_value,
        location=(float(r[idx]), float(yy[idx])),
        margin=-max_value,
        raw_max=float(np.max(values[mask])),
        roundoff_floor=float(floor[idx]),
        cross_check_max=cross_check,
        n_radial=int(grid.rho.size),
        n_points=int(np.count_nonzero(mask)),
    )
    log = logger.info if report.passed else logger.warning
    log('Supersolution t=%g tau=%g eps=%g: max M(S) - floor = %.3e at (r, y) = (%.3g, %.3g) on %d radial nodes',
        p.t, p.tau, p.eps, max_value, report.location[0], report.location[1], report.n_radial)
    return report


def check_r0_bound(env: Envelope, p: SupersolutionParams, mod_profile: RadialProfile,
                   y: Optional[np.ndarray] = None) -> float:
    """sup over y of S(0, y) / h_eps(y), evaluated for t = eps."""
    if p.t != p.eps:
        logger.warning_once('check_r0_bound expects t = eps, got t=%g eps=%g', p.t, p.eps)
    y = env.probe_points() if y is None else np.asarray(y, dtype=float)
    s0 = supersolution_eval(env, p, mod_profile, np.zeros_like(y), y)
    radius, _, _ = env.h_eps(y, p.eps)
    return float(np.max(s0 / radius))


def r0_threshold(env: Envelope, eps: float, constant: float) -> float:
    """C (eps^(1/4) + tau0)^2."""
    return constant * (eps**0.25 + env.tau0)**2


def check_t_monotonicity(
    env: Envelope,
    tau: float,
    eps: float,
    mod_profile: RadialProfile,
    t_values: Sequence[float],
    r: ArrayLike,
    y: ArrayLike,
) -> bool:
    """Whether S_{t,tau,eps} is non-decreasing in t at every (r, y) for the sorted ``t_values``."""
    t_values = sorted(float(t) for t in t_values)
    samples = [supersolution_eval(env, SupersolutionParams(t, tau, eps), mod_profile, r, y) for t in t_values]
    increments = [b - a for a, b in zip(samples, samples[1:])]
    margin = min(float(np.min(inc)) for inc in increments) if increments else 0.0
    logger.debug('Supersolution monotonicity in t: smallest increment %.3e', margin)
    return margin >= 0.0
