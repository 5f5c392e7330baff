"""Balls, chart boxes and the numba-side region primitives used by the simulator.

A region is flattened to ``(kind, params)``:

* ``REGION_BALLS``: intersection of K balls, params = [d, K, (center, radius) * K]
* ``REGION_CHART_BOX``: {y in B(x0, R): rho_Q(y) < r1, |y~| < r2} where rho_Q is
  the vertical distance above the sphere graph in the chart at Q.
  params = [d, x0, R, Q, frame (row-major, last row = inward normal), r1, r2]

For a ball, {rho_Q = r1} is the sphere of radius R around x0 + r1 * n, so every
face of a chart box is a sphere or a cylinder and distances are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numba as nb
import numpy as np
from scipy.special import gammaln, roots_jacobi

from .errors import OutOfChart

REGION_BALLS = 0
REGION_CHART_BOX = 1


def sphere_area(d: int) -> float:
    """Surface area of the unit sphere in R^d."""
    return float(2.0 * math.pi ** (d / 2.0) / math.exp(gammaln(d / 2.0)))


def ball_volume(d: int, r: float = 1.0) -> float:
    return sphere_area(d) * r ** d / d


@lru_cache(maxsize=64)
def _sphere_quadrature(d: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    # product rule in hyperspherical angles; Gauss-Jacobi in cos(theta_k)
    nodes_1d = []
    for k in range(1, d - 1):
        m = d - 1 - k
        a = (m - 1) / 2.0
        t, w = roots_jacobi(n, a, a)
        nodes_1d.append((t, w))
    nphi = 2 * n
    phi = (np.arange(nphi) + 0.5) * (2.0 * math.pi / nphi)
    wphi = np.full(nphi, 2.0 * math.pi / nphi)

    grids = [t for t, _ in nodes_1d] + [phi]
    wgrids = [w for _, w in nodes_1d] + [wphi]
    mesh = np.meshgrid(*grids, indexing="ij")
    wmesh = np.meshgrid(*wgrids, indexing="ij")
    cols = [m.ravel() for m in mesh]
    weights = np.prod([w.ravel() for w in wmesh], axis=0)

    npts = cols[0].size
    pts = np.empty((npts, d))
    sin_prod = np.ones(npts)
    for k in range(d - 2):
        t = cols[k]
        pts[:, k] = sin_prod * t
        sin_prod = sin_prod * np.sqrt(np.clip(1.0 - t * t, 0.0, None))
    pts[:, d - 2] = sin_prod * np.cos(cols[-1])
    pts[:, d - 1] = sin_prod * np.sin(cols[-1])
    pts.setflags(write=False)
    weights.setflags(write=False)
    return pts, weights


def sphere_quadrature(d: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Product quadrature on the unit sphere S^{d-1}; weights sum to its area."""
    if d < 2:
        raise ValueError("d must be >= 2")
    return _sphere_quadrature(int(d), int(n))


# ----------------------------------------------------------------- numba side


@nb.njit(cache=True, inline="always")
def _norm(v):
    s = 0.0
    for i in range(v.shape[0]):
        s += v[i] * v[i]
    return math.sqrt(s)


@nb.njit(cache=True, inline="always")
def region_inside(kind, p, x):
    d = x.shape[0]
    if kind == REGION_BALLS:
        K = int(p[1])
        off = 2
        for k in range(K):
            s = 0.0
            for i in range(d):
                t = x[i] - p[off + i]
                s += t * t
            r = p[off + d]
            if s >= r * r:
                return False
            off += d + 1
        return True
    # chart box
    x0 = p[1:1 + d]
    R = p[1 + d]
    Q = p[2 + d:2 + 2 * d]
    fo = 2 + 2 * d
    r1 = p[fo + d * d]
    r2 = p[fo + d * d + 1]
    s = 0.0
    for i in range(d):
        t = x[i] - x0[i]
        s += t * t
    if s >= R * R:
        return False
    # top face: outside sphere of radius R around x0 + r1 n
    s = 0.0
    for i in range(d):
        t = x[i] - x0[i] - r1 * p[fo + (d - 1) * d + i]
        s += t * t
    if s <= R * R:
        return False
    lat = 0.0
    for a in range(d - 1):
        u = 0.0
        for i in range(d):
            u += p[fo + a * d + i] * (x[i] - Q[i])
        lat += u * u
    return lat < r2 * r2


@nb.njit(cache=True, inline="always")
def region_distance(kind, p, x, normal):
    """Distance from interior x to the boundary; writes the outward unit normal
    of the closest face into ``normal``."""
    d = x.shape[0]
    best = math.inf
    if kind == REGION_BALLS:
        K = int(p[1])
        off = 2
        for k in range(K):
            s = 0.0
            for i in range(d):
                t = x[i] - p[off + i]
                s += t * t
            rr = math.sqrt(s)
            dist = p[off + d] - rr
            if dist < best:
                best = dist
                for i in range(d):
                    normal[i] = (x[i] - p[off + i]) / rr if rr > 0.0 else (1.0 if i == 0 else 0.0)
            off += d + 1
        return best
    x0 = p[1:1 + d]
    R = p[1 + d]
    Q = p[2 + d:2 + 2 * d]
    fo = 2 + 2 * d
    r1 = p[fo + d * d]
    r2 = p[fo + d * d + 1]
    s = 0.0
    for i in range(d):
        t = x[i] - x0[i]
        s += t * t
    rr = math.sqrt(s)
    best = R - rr
    for i in range(d):
        normal[i] = (x[i] - x0[i]) / rr if rr > 0.0 else 0.0
    s = 0.0
    for i in range(d):
        t = x[i] - x0[i] - r1 * p[fo + (d - 1) * d + i]
        s += t * t
    rt = math.sqrt(s)
    dist = rt - R
    if dist < best:
        best = dist
        for i in range(d):
            normal[i] = -(x[i] - x0[i] - r1 * p[fo + (d - 1) * d + i]) / rt
    lat = 0.0
    for a in range(d - 1):
        u = 0.0
        for i in range(d):
            u += p[fo + a * d + i] * (x[i] - Q[i])
        lat += u * u
    lat = math.sqrt(lat)
    dist = r2 - lat
    if dist < best and lat > 0.0:
        best = dist
        for i in range(d):
            normal[i] = 0.0
        for a in range(d - 1):
            u = 0.0
            for i in range(d):
                u += p[fo + a * d + i] * (x[i] - Q[i])
            for i in range(d):
                normal[i] += u / lat * p[fo + a * d + i]
    return best


@nb.njit(cache=True)
def region_crossing(kind, p, xin, xout, out):
    """Boundary point on the segment [xin, xout] (xin inside, xout outside)."""
    d = xin.shape[0]
    lo = 0.0
    hi = 1.0
    tmp = np.empty(d)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        for i in range(d):
            tmp[i] = xin[i] + mid * (xout[i] - xin[i])
        if region_inside(kind, p, tmp):
            lo = mid
        else:
            hi = mid
    for i in range(d):
        tmp[i] = xin[i] + lo * (xout[i] - xin[i])
    # snap onto the nearest face exactly
    nrm = np.empty(d)
    dist = region_distance(kind, p, tmp, nrm)
    for i in range(d):
        out[i] = tmp[i] + dist * nrm[i]


@nb.njit(cache=True)
def _inside_many(kind, p, X, out):
    for n in range(X.shape[0]):
        out[n] = region_inside(kind, p, X[n])


@nb.njit(cache=True)
def _distance_many(kind, p, X, out):
    nrm = np.empty(X.shape[1])
    for n in range(X.shape[0]):
        out[n] = region_distance(kind, p, X[n], nrm)


# --------------------------------------------------------------- python side


class Region:
    """Open set the simulator can exit from."""

    kind: int
    params: np.ndarray
    d: int

    def contains(self, x) -> np.ndarray:
        X = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty(X.shape[0], dtype=np.bool_)
        _inside_many(self.kind, self.params, np.ascontiguousarray(X), out)
        return out[0] if np.ndim(x) == 1 else out

    def distance(self, x) -> np.ndarray:
        """Distance to the region boundary for interior points."""
        X = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty(X.shape[0])
        _distance_many(self.kind, self.params, np.ascontiguousarray(X), out)
        return out[0] if np.ndim(x) == 1 else out

    @property
    def scale(self) -> float:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class BallDomain(Region):
    """Open ball B(center, radius)."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).copy()
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def d(self) -> int:
        return self.center.shape[0]

    @property
    def kind(self) -> int:
        return REGION_BALLS

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([[self.d, 1.0], self.center, [self.radius]])

    @property
    def scale(self) -> float:
        return self.radius

    def delta(self, x) -> np.ndarray:
        """delta_B(x) = R - |x - x0| (positive inside)."""
        x = np.asarray(x, dtype=float)
        return self.radius - np.linalg.norm(x - self.center, axis=-1)

    def boundary_point(self, direction) -> np.ndarray:
        u = np.asarray(direction, dtype=float)
        return self.center + self.radius * u / np.linalg.norm(u)


@dataclass(frozen=True, eq=False)
class BallIntersection(Region):
    """Intersection of balls, e.g. B cap B(Q, r) for local boundary estimates."""

    balls: tuple

    @property
    def d(self) -> int:
        return self.balls[0].d

    @property
    def kind(self) -> int:
        return REGION_BALLS

    @property
    def params(self) -> np.ndarray:
        parts = [[self.d, float(len(self.balls))]]
        for b in self.balls:
            parts.append(b.center)
            parts.append([b.radius])
        return np.concatenate(parts)

    @property
    def scale(self) -> float:
        return min(b.radius for b in self.balls)


def _complete_frame(normal: np.ndarray) -> np.ndarray:
    d = normal.shape[0]
    m = np.column_stack([normal, np.eye(d)])
    q, _ = np.linalg.qr(m)
    q = q[:, :d]
    if q[:, 0] @ normal < 0:
        q[:, 0] = -q[:, 0]
    frame = np.empty((d, d))
    frame[: d - 1] = q[:, 1:].T
    frame[d - 1] = normal
    return frame


@dataclass(frozen=True, eq=False)
class BoundaryChart:
    """Coordinate system CS_Q at a boundary point Q of a ball.

    The last chart axis is the inward normal; the boundary near Q is the graph
    of phi(y~) = R - sqrt(R^2 - |y~|^2).
    """

    domain: BallDomain
    Q: np.ndarray
    frame: np.ndarray
    R1: float
    M1: float
    delta0: float

    @classmethod
    def at(cls, domain: BallDomain, direction, R1: float | None = None,
           M1: float | None = None, delta0: float | None = None) -> "BoundaryChart":
        """Chart at the boundary point in ``direction`` from the center."""
        u = np.asarray(direction, dtype=float)
        u = u / np.linalg.norm(u)
        R = domain.radius
        Q = domain.center + R * u
        frame = _complete_frame(-u)
        if R1 is None:
            R1 = R / 8.0
        if not R1 < R / 4.0:
            raise ValueError("localization radius must satisfy R1 < R/4")
        if M1 is None:
            M1 = R * R / (R * R - R1 * R1) ** 1.5
        r0 = R1 / (4.0 * (1.0 + M1 * M1))
        if delta0 is None:
            delta0 = r0 / 2.0
        return cls(domain, Q, frame, float(R1), float(M1), float(delta0))

    @property
    def d(self) -> int:
        return self.domain.d

    @property
    def r0(self) -> float:
        return self.R1 / (4.0 * (1.0 + self.M1 ** 2))

    @property
    def inward_normal(self) -> np.ndarray:
        return self.frame[-1]

    def to_chart(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return (y - self.Q) @ self.frame.T

    def from_chart(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return self.Q + u @ self.frame

    def phi(self, yt) -> np.ndarray:
        yt = np.asarray(yt, dtype=float)
        R = self.domain.radius
        s2 = np.sum(yt * yt, axis=-1)
        return R - np.sqrt(R * R - s2)

    def grad_phi(self, yt) -> np.ndarray:
        yt = np.asarray(yt, dtype=float)
        R = self.domain.radius
        s2 = np.sum(yt * yt, axis=-1, keepdims=True)
        return yt / np.sqrt(R * R - s2)

    def rho(self, y, frame: str = "world") -> np.ndarray:
        """rho_Q(y) = y_d - phi(y~); raises OutOfChart when |y~| >= R1."""
        u = self.to_chart(y) if frame == "world" else np.asarray(y, dtype=float)
        yt = u[..., :-1]
        if np.any(np.linalg.norm(yt, axis=-1) >= self.R1):
            raise OutOfChart("point lies outside the chart cylinder |y~| < R1")
        return u[..., -1] - self.phi(yt)

    def in_box(self, y, r1: float, r2: float) -> np.ndarray:
        """Membership in D_Q(r1, r2) = {y in B: 0 < rho_Q(y) < r1, |y~| < r2}."""
        u = self.to_chart(y)
        yt = u[..., :-1]
        lat = np.linalg.norm(yt, axis=-1)
        R = self.domain.radius
        s2 = np.minimum(np.sum(yt * yt, axis=-1), R * R)
        rho = u[..., -1] - (R - np.sqrt(R * R - s2))
        inside_ball = self.domain.delta(y) > 0
        return inside_ball & (rho > 0) & (rho < r1) & (lat < r2)

    def box(self, r1: float, r2: float) -> "ChartBox":
        return ChartBox(self, float(r1), float(r2))

    def normal_point(self, depth: float) -> np.ndarray:
        """Point on the inward normal through Q at distance ``depth`` from Q."""
        return self.Q + depth * self.inward_normal


@dataclass(frozen=True, eq=False)
class ChartBox(Region):
    chart: BoundaryChart
    r1: float
    r2: float

    @property
    def d(self) -> int:
        return self.chart.d

    @property
    def kind(self) -> int:
        return REGION_CHART_BOX

    @property
    def params(self) -> np.ndarray:
        ch = self.chart
        return np.concatenate([[self.d], ch.domain.center, [ch.domain.radius], ch.Q,
                               ch.frame.ravel(), [self.r1, self.r2]])

    @property
    def scale(self) -> float:
        return min(self.r1, self.r2)
