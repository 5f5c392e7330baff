"""Finite-volume oracle for the killed jump diffusion on a ball.

Cells are the points x0 + h k (k integer) strictly inside the ball.  The
generator is a dense matrix over cells plus exit channels:

* diffusion in conservation form; an axis neighbour outside the ball becomes
  a link to the boundary crossing point at distance theta*h with rate
  a/(2 theta h^2), which keeps the interior block symmetric;
* cross derivatives by the symmetric 4-corner stencil (no diagonal term);
* jumps between cells with weight J(x_i, x_j) h^d, sub-cell Gauss quadrature
  for touching cells, and the second moment of the self cell folded into the
  diffusion when both parts are on;
* jumps leaving the ball by ray quadrature from each cell: along direction w
  the exterior mass is (1/alpha) rho(w)^-alpha, split at the partition shells.

G = (-L)^{-1}/h^d approximates the killed Green function.
"""

from __future__ import annotations

import io
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numba as nb
import numpy as np
import scipy.linalg as sla
from scipy.spatial import cKDTree

from .errors import (DegenerateColumn, NonMonotoneStencil, NotGaugeable, SolverFailure,
                     ZeroSolution)
from .fields import J_DEFAULT, Potential, diffusion_eval, kernel_eval
from .geometry import BallDomain, BoundaryChart, sphere_quadrature
from .model import OperatorModel
from .partition import ExitPartition

SYM_TOL = 1e-9


# -------------------------------------------------------------------- mesh


@dataclass(frozen=True, eq=False)
class Mesh:
    """Cells x0 + h k strictly inside B(x0, R); ``lookup`` maps shifted k to index."""

    domain: BallDomain
    h: float
    coords: np.ndarray  # (n, d) integer lattice coordinates
    lookup: np.ndarray  # flat array over (2m+1)^d, -1 outside
    m: int

    @classmethod
    def build(cls, domain: BallDomain, h: float) -> "Mesh":
        d, R = domain.d, domain.radius
        if R / h < 5:
            raise ValueError("mesh too coarse: need at least 5 cells across the radius")
        m = int(math.ceil(R / h)) + 2
        ax = np.arange(-m, m + 1)
        K = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
        r = np.linalg.norm(K * h, axis=1)
        inside = r < R * (1 - 1e-12)
        coords = K[inside]
        lookup = np.full(K.shape[0], -1, dtype=np.int64)
        lookup[np.flatnonzero(inside)] = np.arange(coords.shape[0])
        return cls(domain, float(h), coords.astype(np.int64), lookup, m)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def d(self) -> int:
        return self.domain.d

    @property
    def volume(self) -> float:
        return self.h ** self.d

    @property
    def centers(self) -> np.ndarray:
        return self.domain.center + self.h * self.coords

    @property
    def delta(self) -> np.ndarray:
        return self.domain.delta(self.centers)

    def index_of(self, k) -> int:
        k = np.asarray(k, dtype=np.int64)
        if np.any(np.abs(k) > self.m):
            return -1
        flat = 0
        for v in k:
            flat = flat * (2 * self.m + 1) + int(v) + self.m
        return int(self.lookup[flat])

    def nearest(self, points) -> np.ndarray:
        """Index of the cell whose center is closest to each point."""
        P = np.atleast_2d(np.asarray(points, dtype=float))
        tree = cKDTree(self.centers)
        _, idx = tree.query(P)
        return np.asarray(idx, dtype=np.int64)

    def cells_at(self, points, tol: float = 1e-9) -> np.ndarray:
        """Exact cell index of lattice points (raises if a point is not a center)."""
        P = np.atleast_2d(np.asarray(points, dtype=float))
        K = (P - self.domain.center) / self.h
        Kr = np.rint(K)
        if np.any(np.abs(K - Kr) > tol):
            raise ValueError("point is not a cell center of this mesh")
        out = np.array([self.index_of(k) for k in Kr.astype(np.int64)])
        if np.any(out < 0):
            raise ValueError("point is not an interior cell center")
        return out


# ------------------------------------------------------------ assembly


def _cube_moment(d: int, alpha: float, n: int = 24) -> float:
    """Integral of |u|^(2-d-alpha) over the unit cube [-1/2, 1/2]^d.

    Split into 2d pyramids; after scaling each is a smooth integral over
    [-1, 1]^(d-1) times a radial power.
    """
    t, w = np.polynomial.legendre.leggauss(n)
    grids = np.meshgrid(*([t] * (d - 1)), indexing="ij")
    wts = np.prod(np.meshgrid(*([w] * (d - 1)), indexing="ij"), axis=0)
    s2 = sum(g * g for g in grids)
    inner = float(np.sum(wts * (1.0 + s2) ** ((2.0 - d - alpha) / 2.0)))
    return 2 * d * 0.5 ** (2.0 - alpha) / (2.0 - alpha) * inner


@nb.njit(cache=True)
def _flat(k, m):
    flat = 0
    for v in k:
        flat = flat * (2 * m + 1) + v + m
    return flat


@nb.njit(cache=True)
def _assemble_diffusion(coords, lookup, m, h, center, R, a_code, a_p, extra_diag, L,
                        link_cell, link_pt, link_rate):
    n, d = coords.shape
    A = np.empty((d, d))
    xf = np.empty(d)
    kk = np.empty(d, dtype=np.int64)
    nl = 0
    neg = 0
    h2 = h * h
    for i in range(n):
        xi = center + h * coords[i].astype(np.float64)
        for k in range(d):
            for s in (-1, 1):
                for q in range(d):
                    kk[q] = coords[i, q]
                kk[k] += s
                j = lookup[_flat(kk, m)]
                if j >= 0:
                    for q in range(d):
                        xf[q] = xi[q]
                    xf[k] += 0.5 * s * h
                    diffusion_eval(a_code, a_p, xf, A)
                    L[i, j] += 0.5 * (A[k, k] + extra_diag) / h2
                else:
                    rel = xi - center
                    b = s * rel[k]
                    c = 0.0
                    for q in range(d):
                        c += rel[q] * rel[q]
                    t = -b + math.sqrt(b * b - (c - R * R))
                    theta = min(t / h, 1.0)
                    for q in range(d):
                        xf[q] = xi[q]
                    xf[k] += 0.5 * s * t
                    diffusion_eval(a_code, a_p, xf, A)
                    for q in range(d):
                        link_pt[nl, q] = xi[q]
                    link_pt[nl, k] += s * t
                    link_cell[nl] = i
                    link_rate[nl] = 0.5 * (A[k, k] + extra_diag) / (theta * h2)
                    nl += 1
        for k in range(d):
            for l in range(k + 1, d):
                for sk in (-1, 1):
                    for sl in (-1, 1):
                        for q in range(d):
                            xf[q] = xi[q]
                        xf[k] += sk * h
                        diffusion_eval(a_code, a_p, xf, A)
                        akl = A[k, l]
                        for q in range(d):
                            xf[q] = xi[q]
                        xf[l] += sl * h
                        diffusion_eval(a_code, a_p, xf, A)
                        akl += A[k, l]
                        coef = sk * sl * akl / (8.0 * h2)
                        if coef == 0.0:
                            continue
                        if coef < 0.0:
                            neg += 1
                        for q in range(d):
                            kk[q] = coords[i, q]
                        kk[k] += sk
                        kk[l] += sl
                        j = lookup[_flat(kk, m)]
                        if j >= 0:
                            L[i, j] += coef
                        else:
                            for q in range(d):
                                xf[q] = xi[q]
                            xf[k] += sk * h
                            xf[l] += sl * h
                            rr = 0.0
                            for q in range(d):
                                rr += (xf[q] - center[q]) ** 2
                            rr = math.sqrt(rr)
                            for q in range(d):
                                link_pt[nl, q] = center[q] + R * (xf[q] - center[q]) / rr
                            link_cell[nl] = i
                            link_rate[nl] = coef
                            nl += 1
    return nl, neg


@nb.njit(cache=True)
def _assemble_jumps(coords, h, center, j_code, j_p, adj_w, sub_u, sub_w, L):
    # adj_w: weights for touching offsets (default kernel), indexed by offset in {-1,0,1}^d
    n, d = coords.shape
    vol = h ** d
    x = np.empty(d)
    y = np.empty(d)
    for i in range(n):
        for q in range(d):
            x[q] = center[q] + h * coords[i, q]
        for j in range(n):
            if j == i:
                continue
            linf = 0
            idx = 0
            for q in range(d):
                dk = coords[j, q] - coords[i, q]
                if abs(dk) > linf:
                    linf = abs(dk)
                idx = idx * 3 + (dk + 1 if abs(dk) <= 1 else 0)
            if linf == 1:
                if j_code == J_DEFAULT:
                    w = adj_w[idx]
                else:
                    # symmetrized sub-cell average
                    w = 0.0
                    for p in range(sub_u.shape[0]):
                        for q in range(d):
                            y[q] = center[q] + h * (coords[j, q] + sub_u[p, q])
                        w += sub_w[p] * kernel_eval(j_code, j_p, x, y)
                    xj = np.empty(d)
                    for q in range(d):
                        xj[q] = center[q] + h * coords[j, q]
                    w2 = 0.0
                    for p in range(sub_u.shape[0]):
                        for q in range(d):
                            y[q] = center[q] + h * (coords[i, q] + sub_u[p, q])
                        w2 += sub_w[p] * kernel_eval(j_code, j_p, xj, y)
                    w = 0.5 * (w + w2) * vol
            else:
                for q in range(d):
                    y[q] = center[q] + h * coords[j, q]
                w = kernel_eval(j_code, j_p, x, y) * vol
            L[i, j] += w


@dataclass
class DiscreteGenerator:
    """Generator matrix over interior cells plus its exit channels.

    ``link_*`` are continuous exits (cell, boundary point, rate); ``node_*``
    are exterior jump landings stored per cell as a (n, K) block.
    ``absorption`` is (n, partition.n_cells): exit rate into each cell of the
    exit partition, continuous exits in the caps.
    """

    model: OperatorModel
    mesh: Mesh
    partition: ExitPartition
    L: np.ndarray
    link_cell: np.ndarray
    link_pt: np.ndarray
    link_rate: np.ndarray
    node_pt: np.ndarray  # (n, K, d)
    node_rate: np.ndarray  # (n, K)
    absorption_cont: np.ndarray
    absorption_jump: np.ndarray
    truncated: bool = False
    negative_offdiag: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.mesh.n

    @property
    def absorption(self) -> np.ndarray:
        return self.absorption_cont + self.absorption_jump

    @property
    def exit_rate(self) -> np.ndarray:
        return self.absorption.sum(axis=1)

    @property
    def cont_exit_rate(self) -> np.ndarray:
        return self.absorption_cont.sum(axis=1)

    @property
    def jump_exit_rate(self) -> np.ndarray:
        return self.absorption_jump.sum(axis=1)

    def inflow(self, f: Callable) -> np.ndarray:
        """b_i = sum over exit channels of rate * f(exit point)."""
        b = np.zeros(self.n)
        if self.link_cell.size:
            v = np.asarray(f(self.link_pt), dtype=float)
            np.add.at(b, self.link_cell, self.link_rate * v)
        if self.node_rate.size:
            K = self.node_rate.shape[1]
            v = np.asarray(f(self.node_pt.reshape(-1, self.mesh.d)), dtype=float).reshape(self.n, K)
            b += np.sum(self.node_rate * v, axis=1)
        return b

    def outflow_residual(self) -> float:
        """max relative mismatch between -diag and total outflow per row."""
        off = self.L.sum(axis=1) - np.diag(self.L)
        out = off + self.exit_rate
        dg = -np.diag(self.L)
        return float(np.max(np.abs(out - dg) / np.abs(dg)))

    def jump_block(self) -> np.ndarray:
        return self.meta.get("jump_block")


def _exterior_nodes(model: OperatorModel, mesh: Mesh, partition: ExitPartition, truncated: bool,
                    n_dir: int, n_gauss: int):
    d = mesh.d
    dom = mesh.domain
    R = dom.radius
    k = model.kernel
    alpha = k.alpha
    dirs, wdir = sphere_quadrature(d, n_dir)
    g, gw = np.polynomial.legendre.leggauss(n_gauss)
    g = 0.5 * (g + 1.0)
    gw = 0.5 * gw
    X = mesh.centers
    rel = X - dom.center
    edges = np.linspace(1.0, partition.r_ext / R, partition.n_shells + 1) * R
    # ray distance from x to the sphere of radius e around x0 along each direction
    b = rel @ dirs.T  # (n, D)
    c2 = np.sum(rel * rel, axis=1)[:, None]
    rho = [(-b + np.sqrt(b * b - (c2 - e * e))) for e in edges]
    rho0 = rho[0]
    s_edges = [np.ones_like(rho0)] + [(rho0 / r) ** alpha for r in rho[1:]] + [np.zeros_like(rho0)]
    lo_trunc = np.minimum(rho0 ** alpha, 1.0) if truncated else np.zeros_like(rho0)
    pts, rates = [], []
    for seg in range(len(s_edges) - 1):
        s_hi = s_edges[seg]
        s_lo = s_edges[seg + 1]
        s_lo = np.maximum(s_lo, lo_trunc)
        width = np.maximum(s_hi - s_lo, 0.0)
        for gi in range(n_gauss):
            s = s_lo + g[gi] * width
            s = np.maximum(s, 1e-300)
            r = rho0 * s ** (-1.0 / alpha)
            P = X[:, None, :] + r[:, :, None] * dirs[None, :, :]
            wt = (k.c / alpha) * rho0 ** (-alpha) * width * gw[gi] * wdir[None, :]
            pts.append(P)
            rates.append(wt)
    P = np.concatenate(pts, axis=1)
    W = np.concatenate(rates, axis=1)
    if not k.is_default:
        # replace the reference level c by the actual J(x, y)|x - y|^(d+alpha)
        n, K, _ = P.shape
        Xb = np.broadcast_to(X[:, None, :], P.shape).reshape(-1, d)
        Y = P.reshape(-1, d)
        dist = np.linalg.norm(Y - Xb, axis=1)
        lev = k(Xb, Y) * dist ** (d + alpha)
        W = W * (lev.reshape(n, K) / k.c)
    return P, W


def assemble_generator(model: OperatorModel, domain: BallDomain, mesh: Mesh | None = None,
                       h: float | None = None, partition: ExitPartition | None = None,
                       truncated: bool = False, n_dir: int = 8, n_gauss: int = 3,
                       monotone_tol: float = 0.0) -> DiscreteGenerator:
    """Dense generator over the cells of ``mesh`` (built with spacing h if absent)."""
    if mesh is None:
        mesh = Mesh.build(domain, h if h is not None else domain.radius / 8.0)
    partition = partition or ExitPartition(domain)
    d, n, hh = mesh.d, mesh.n, mesh.h
    R = domain.radius
    center = np.asarray(domain.center, dtype=float)
    L = np.zeros((n, n))
    k = model.kernel
    max_links = n * (2 * d + 2 * d * (d - 1))
    link_cell = np.zeros(max_links, dtype=np.int64)
    link_pt = np.zeros((max_links, d))
    link_rate = np.zeros(max_links)
    nl, neg = 0, 0
    m0 = 0.0
    if model.jumps_enabled:
        if not k.compiled:
            Xc = mesh.centers
            for i in range(n):
                row = k(np.broadcast_to(Xc[i], Xc.shape), Xc)
                row[i] = 0.0
                L[i] += row * mesh.volume
        else:
            u, w = np.polynomial.legendre.leggauss(5)
            u = 0.5 * u
            w = 0.5 * w
            sub_u = np.stack(np.meshgrid(*([u] * d), indexing="ij"), axis=-1).reshape(-1, d)
            sub_w = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij"), axis=-1).reshape(-1, d), axis=1)
            offs = np.stack(np.meshgrid(*([np.arange(-1, 2)] * d), indexing="ij"), axis=-1).reshape(-1, d)
            adj = np.zeros(offs.shape[0])
            for oi, off in enumerate(offs):
                if np.all(off == 0):
                    continue
                r = np.linalg.norm(hh * (off[None, :] + sub_u), axis=1)
                adj[oi] = np.sum(sub_w * k.c * r ** (-d - k.alpha)) * mesh.volume
            _assemble_jumps(mesh.coords, hh, center, k.code, np.asarray(k.params, dtype=float),
                            adj, sub_u, sub_w, L)
        if truncated:
            X = mesh.centers
            D = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=2)
            L[D >= 1.0] = 0.0
        if model.diffusion_enabled:
            m0 = k.c / d * hh ** (2.0 - k.alpha) * _cube_moment(d, k.alpha)
    jump_sym = float(np.max(np.abs(L - L.T))) if model.jumps_enabled else 0.0
    if model.diffusion_enabled:
        nl, neg = _assemble_diffusion(mesh.coords, mesh.lookup, mesh.m, hh, center, R,
                                      model.diffusion.code, np.asarray(model.diffusion.params, dtype=float),
                                      m0, L, link_cell, link_pt, link_rate)
    link_cell, link_pt, link_rate = link_cell[:nl].copy(), link_pt[:nl].copy(), link_rate[:nl].copy()
    if neg:
        warnings.warn(f"{neg} cross-derivative stencil entries are negative", NonMonotoneStencil,
                      stacklevel=2)
    if model.jumps_enabled:
        node_pt, node_rate = _exterior_nodes(model, mesh, partition, truncated, n_dir, n_gauss)
    else:
        node_pt, node_rate = np.zeros((n, 0, d)), np.zeros((n, 0))
    a_cont = np.zeros((n, partition.n_cells))
    if nl:
        cells = partition.classify(link_pt, False)
        np.add.at(a_cont, (link_cell, cells), link_rate)
    a_jump = np.zeros((n, partition.n_cells))
    if node_rate.size:
        K = node_rate.shape[1]
        cells = partition.classify(node_pt.reshape(-1, d), True).reshape(n, K)
        rows = np.repeat(np.arange(n), K)
        np.add.at(a_jump, (rows, cells.ravel()), node_rate.ravel())
    np.fill_diagonal(L, 0.0)
    exit_rate = a_cont.sum(axis=1) + a_jump.sum(axis=1)
    L[np.diag_indices(n)] = -(L.sum(axis=1) + exit_rate)
    return DiscreteGenerator(model, mesh, partition, L, link_cell, link_pt, link_rate, node_pt,
                             node_rate, a_cont, a_jump, truncated, neg,
                             {"self_cell_moment": m0, "jump_block_asymmetry": jump_sym,
                              "n_dir": n_dir, "n_gauss": n_gauss})


# ----------------------------------------------------------------- Green


@dataclass
class GreenMatrix:
    """G with (-L) G h^d = I, plus the factorization of -L for further solves."""

    G: np.ndarray
    gen: DiscreteGenerator
    factor: tuple
    method: str
    condition: float = math.nan

    @property
    def mesh(self) -> Mesh:
        return self.gen.mesh

    @property
    def h(self) -> float:
        return self.gen.mesh.h

    def solve(self, b: np.ndarray) -> np.ndarray:
        """x with (-L) x = b."""
        if self.method == "cholesky":
            return sla.cho_solve(self.factor, b)
        return sla.lu_solve(self.factor, b)

    def symmetry_error(self) -> float:
        return float(np.max(np.abs(self.G - self.G.T)) / np.max(np.abs(self.G)))


def green_matrix(gen: DiscreteGenerator, method: str = "auto", validate: bool = True) -> GreenMatrix:
    """Dense Green matrix.  ``lu`` keeps the symmetry check meaningful; ``cholesky``
    (used automatically above 4000 cells) exploits the symmetric scheme."""
    n = gen.n
    A = -gen.L
    if method == "auto":
        method = "lu" if n <= 4000 else "cholesky"
    try:
        if method == "cholesky":
            fac = sla.cho_factor(A, lower=False, overwrite_a=False, check_finite=False)
            inv, info = sla.lapack.dpotri(fac[0], lower=0)
            if info != 0:
                raise np.linalg.LinAlgError(f"dpotri info={info}")
            iu = np.triu_indices(n, 1)
            inv[(iu[1], iu[0])] = inv[iu]
        else:
            fac = sla.lu_factor(A, check_finite=False)
            inv = sla.lu_solve(fac, np.eye(n), check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverFailure(f"factorization of -L failed: {exc}") from None
    if not np.all(np.isfinite(inv)):
        raise SolverFailure("non-finite entries in the Green matrix")
    G = inv / gen.mesh.volume
    cond = float(np.linalg.norm(A, 1) * np.linalg.norm(inv, 1))
    if cond > 1e14:
        raise SolverFailure(f"generator is ill-conditioned (condition estimate {cond:.3g})")
    gm = GreenMatrix(G, gen, fac, method, cond)
    if validate:
        if np.min(G) <= 0:
            raise SolverFailure("Green matrix has non-positive entries")
    return gm


# ----------------------------------------------------------- solves on cells


def exit_time_grid(gm: GreenMatrix) -> np.ndarray:
    return gm.G.sum(axis=1) * gm.mesh.volume


def dirichlet_grid(gm: GreenMatrix, f: Callable) -> np.ndarray:
    return gm.solve(gm.gen.inflow(f))


def exit_distribution(gm: GreenMatrix, cells=None) -> np.ndarray:
    """omega(x_i, cell) over the exit partition for the given cells (all by default)."""
    G = gm.G if cells is None else gm.G[np.atleast_1d(cells)]
    return gm.mesh.volume * G @ gm.gen.absorption


def _q_values(gm: GreenMatrix, q: Potential) -> np.ndarray:
    return np.asarray(q(gm.mesh.centers), dtype=float)


def _power_radius(gm: GreenMatrix, qv: np.ndarray, iters: int = 500, tol: float = 1e-10) -> float:
    # symmetric form |Q|^1/2 (-L)^-1 |Q|^1/2 S has the spectrum of K up to sign structure
    s = np.sqrt(np.abs(qv))
    sg = np.sign(qv)
    v = np.ones(qv.size) / math.sqrt(qv.size)
    lam = 0.0
    for _ in range(iters):
        w = s * gm.solve(s * sg * v)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        new = nw
        v = w / nw
        if abs(new - lam) <= tol * max(new, 1e-300):
            lam = new
            break
        lam = new
    return lam


def gauge_spectrum(gm: GreenMatrix, q: Potential) -> tuple[float, float]:
    """(spectral radius, top real eigenvalue) of K = h^d G diag(q)."""
    qv = _q_values(gm, q)
    if not np.any(qv):
        return 0.0, 0.0
    radius = _power_radius(gm, qv)
    if np.all(qv >= 0):
        return radius, radius
    if np.all(qv <= 0):
        # K is similar to a negative semidefinite matrix
        return radius, 0.0
    A = -gm.gen.L
    top = sla.eigh(np.diag(qv), A, eigvals_only=True, subset_by_index=[qv.size - 1, qv.size - 1])
    return radius, float(top[0])


@dataclass
class GaugeSolver:
    gm: GreenMatrix
    q: Potential
    qv: np.ndarray
    factor: tuple
    radius: float
    top: float

    def apply(self, rhs: np.ndarray) -> np.ndarray:
        """Solve (I - K) u = rhs."""
        return sla.lu_solve(self.factor, rhs)


def gauge_operator(gm: GreenMatrix, q: Potential):
    """LU of I - K, or NotGaugeable when the top eigenvalue of K is >= 1."""
    qv = _q_values(gm, q)
    radius, top = gauge_spectrum(gm, q)
    if top >= 1.0:
        return NotGaugeable(radius, top)
    K = gm.mesh.volume * gm.G * qv[None, :]
    M = np.eye(gm.gen.n) - K
    fac = sla.lu_factor(M, check_finite=False)
    return GaugeSolver(gm, q, qv, fac, radius, top)


def gauge_grid(gm: GreenMatrix, q: Potential):
    """H with (I - K) H = 1, or NotGaugeable."""
    if q.is_zero:
        return np.ones(gm.gen.n)
    op = gauge_operator(gm, q)
    if isinstance(op, NotGaugeable):
        return op
    return op.apply(np.ones(gm.gen.n))


def schrodinger_grid(gm: GreenMatrix, q: Potential, f: Callable):
    """u = (I - K)^{-1} v where v is the discrete Dirichlet solution for f."""
    v = dirichlet_grid(gm, f)
    if q.is_zero:
        return v
    op = gauge_operator(gm, q)
    if isinstance(op, NotGaugeable):
        return op
    return op.apply(v)


@dataclass
class ConditionalGaugeReport:
    poles: np.ndarray
    F: np.ndarray  # (n, n_poles), nan on the pole itself
    min_F: np.ndarray
    max_F: np.ndarray

    @property
    def overall_min(self) -> float:
        return float(np.nanmin(self.F))

    @property
    def overall_max(self) -> float:
        return float(np.nanmax(self.F))


def conditional_gauge_grid(gm: GreenMatrix, q: Potential, poles) -> ConditionalGaugeReport:
    """F(x, y) = V(x, y)/G(x, y) with V = (I - K)^{-1} G, for each pole cell y."""
    poles = np.atleast_1d(np.asarray(poles, dtype=np.int64))
    Gc = gm.G[:, poles]
    if q.is_zero:
        F = np.ones_like(Gc)
    else:
        op = gauge_operator(gm, q)
        if isinstance(op, NotGaugeable):
            return op
        V = op.apply(Gc)
        F = V / Gc
    F = F.copy()
    F[poles, np.arange(poles.size)] = np.nan
    return ConditionalGaugeReport(poles, F, np.nanmin(F, axis=0), np.nanmax(F, axis=0))


@dataclass
class BetaReport:
    beta: float
    witness: tuple
    beta_removed: float
    removed_cells: np.ndarray
    rows: np.ndarray


def beta_q_grid(gm: GreenMatrix, q: Potential, rows=None, removed_volume: float | None = None) -> BetaReport:
    """max over pairs (x, z), x != z, of sum_y G(x,y)G(y,z)|q(y)|h^d / G(x,z).

    The outer max runs over ``rows`` (default: every cell when n <= 2500,
    otherwise every 8th cell).  The sensitivity row zeroes q on the cells that
    contribute most to the witness pair until their volume reaches
    ``removed_volume`` (default 5% of the ball) and reports the new max.
    """
    n = gm.gen.n
    vol = gm.mesh.volume
    if rows is None:
        rows = np.arange(n) if n <= 2500 else np.arange(0, n, 8)
    rows = np.asarray(rows, dtype=np.int64)
    qa = np.abs(_q_values(gm, q))
    if not np.any(qa):
        return BetaReport(0.0, (int(rows[0]), int(rows[0])), 0.0, np.zeros(0, dtype=np.int64), rows)

    def evaluate(qq):
        T = (gm.G[rows] * (qq * vol)[None, :]) @ gm.G
        Rm = T / gm.G[rows]
        Rm[np.arange(rows.size), rows] = -np.inf
        a = int(np.argmax(Rm))
        i, j = divmod(a, n)
        return float(Rm[i, j]), (int(rows[i]), int(j))

    beta, (x, z) = evaluate(qa)
    contrib = gm.G[x] * gm.G[:, z] * qa * vol
    order = np.argsort(-contrib, kind="stable")
    if removed_volume is None:
        removed_volume = 0.05 * gm.mesh.domain.radius ** gm.mesh.d * math.pi ** (gm.mesh.d / 2) / math.gamma(gm.mesh.d / 2 + 1)
    k = int(min(n, max(1, math.floor(removed_volume / vol))))
    removed = order[:k]
    q2 = qa.copy()
    q2[removed] = 0.0
    beta2, _ = evaluate(q2)
    return BetaReport(beta, (x, z), beta2, removed, rows)


@dataclass
class HarnackGrid:
    u: np.ndarray
    cells: np.ndarray
    ratio: float
    witness: tuple


def harnack_grid(gm: GreenMatrix, q: Potential, f: Callable, cells=None):
    """Schrodinger exit solution and its max/min ratio over cells in B(x0, R/2)."""
    u = schrodinger_grid(gm, q, f)
    if isinstance(u, NotGaugeable):
        return u
    if np.all(u == 0):
        raise ZeroSolution("boundary data produce u = 0")
    if cells is None:
        X = gm.mesh.centers - gm.mesh.domain.center
        cells = np.flatnonzero(np.linalg.norm(X, axis=1) <= gm.mesh.domain.radius / 2 * (1 + 1e-12))
    cells = np.asarray(cells, dtype=np.int64)
    v = u[cells]
    if np.any(v <= 0):
        raise ZeroSolution("u vanishes at a half-ball cell")
    i, j = int(np.argmax(v)), int(np.argmin(v))
    return HarnackGrid(u, cells, float(v[i] / v[j]), (int(cells[i]), int(cells[j])))


# ------------------------------------------------------- Green inequalities


@dataclass
class ConstantReport:
    value: float
    witness: tuple
    extra: dict = field(default_factory=dict)


def _newton(r, d):
    return r ** (2.0 - d)


def check_3g(gm: GreenMatrix, triples, bins: int = 20) -> ConstantReport:
    """max over triples of G(x,y)G(y,z)/G(x,z) / (|x-y|^(2-d) + |y-z|^(2-d))."""
    T = np.asarray(triples, dtype=np.int64)
    if np.any((T[:, 0] == T[:, 1]) | (T[:, 1] == T[:, 2]) | (T[:, 0] == T[:, 2])):
        raise ValueError("triples must have pairwise distinct cells")
    X = gm.mesh.centers
    d = gm.mesh.d
    G = gm.G
    lhs = G[T[:, 0], T[:, 1]] * G[T[:, 1], T[:, 2]] / G[T[:, 0], T[:, 2]]
    rxy = np.linalg.norm(X[T[:, 0]] - X[T[:, 1]], axis=1)
    ryz = np.linalg.norm(X[T[:, 1]] - X[T[:, 2]], axis=1)
    ratio = lhs / (_newton(rxy, d) + _newton(ryz, d))
    i = int(np.argmax(ratio))
    hist, edges = np.histogram(ratio, bins=bins)
    return ConstantReport(float(ratio[i]), tuple(int(v) for v in T[i]),
                          {"ratios": ratio, "histogram": hist, "edges": edges})


@dataclass
class GreenBoundsReport:
    c_up: float
    up_witness: tuple
    c_low: float
    low_witness: tuple
    n_pairs: int
    n_interior_pairs: int


def green_bounds_report(gm: GreenMatrix, cells=None, min_sep: float = 0.0) -> GreenBoundsReport:
    """Fitted c_up = max G|x-y|^(d-2) and c_low = min of the same over pairs with
    2|x-y| <= delta(x) ^ delta(y), over distinct cells (optionally a subset,
    optionally with |x-y| >= min_sep)."""
    cells = np.arange(gm.gen.n) if cells is None else np.asarray(cells, dtype=np.int64)
    X = gm.mesh.centers[cells]
    dl = gm.mesh.domain.delta(X)
    d = gm.mesh.d
    D = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=2)
    Gs = gm.G[np.ix_(cells, cells)]
    V = Gs * D ** (d - 2)
    mask = (D > 0) & (D >= min_sep)
    iu = np.where(mask, V, -np.inf)
    a = int(np.argmax(iu))
    i, j = divmod(a, cells.size)
    inter = mask & (2 * D <= np.minimum(dl[:, None], dl[None, :]))
    if np.any(inter):
        il = np.where(inter, V, np.inf)
        b = int(np.argmin(il))
        k, l = divmod(b, cells.size)
        c_low, lw = float(il.flat[b]), (int(cells[k]), int(cells[l]))
    else:
        c_low, lw = math.nan, ()
    return GreenBoundsReport(float(iu.flat[a]), (int(cells[i]), int(cells[j])), c_low, lw,
                             int(mask.sum()), int(inter.sum()))


def boundary_decay_report(gm: GreenMatrix, x_cell: int, chart: BoundaryChart, radius: float,
                          cells=None, floor: float = 0.0) -> ConstantReport:
    """min over cells y in B cap B(Q, radius) (delta(y) > floor) of G(x, y)/delta(y)."""
    Xc = gm.mesh.centers
    if np.linalg.norm(Xc[x_cell] - chart.Q) < radius:
        raise ValueError("x must lie outside B(Q, radius)")
    cand = np.arange(gm.gen.n) if cells is None else np.asarray(cells, dtype=np.int64)
    P = Xc[cand]
    dl = gm.mesh.domain.delta(P)
    sel = (np.linalg.norm(P - chart.Q, axis=1) < radius) & (dl > floor)
    if not np.any(sel):
        raise ValueError("no cells in the decay region")
    ys = cand[sel]
    ratio = gm.G[x_cell, ys] / dl[sel]
    i = int(np.argmin(ratio))
    order = np.argsort(dl[sel])
    return ConstantReport(float(ratio[i]), (int(x_cell), int(ys[i])),
                          {"cells": ys[order], "delta": dl[sel][order], "ratio": ratio[order]})


# -------------------------------------------------------------- Martin kernel


@dataclass
class MartinKernel:
    """M[i, j] = G[i, j]/G[ref, j] and boundary limits at exit points."""

    gm: GreenMatrix
    ref: int
    M: np.ndarray

    def boundary_weights(self, points, radius_cells: float = 3.2, decay: float = 0.15,
                         min_cells: int = 12):
        """Least-squares weights w(z) with M(x, z) ~ sum_j w_j M(x, j).

        Fits M(x, y) ~ c0 + c . (y - z) + c2 depth(y)^2 over cells within
        ``radius_cells`` * h of the boundary point z (Gaussian weights
        exp(-decay |y - z|^2/h^2)) and returns the intercept functional.
        """
        Z = np.atleast_2d(np.asarray(points, dtype=float))
        h = self.gm.h
        X = self.gm.mesh.centers
        c0 = self.gm.mesh.domain.center
        tree = cKDTree(X)
        idx_list, w_list = [], []
        for z in Z:
            rad = radius_cells * h
            nb_ = tree.query_ball_point(z, rad)
            while len(nb_) < min_cells:
                rad *= 1.3
                nb_ = tree.query_ball_point(z, rad)
            nb_ = np.array(sorted(nb_), dtype=np.int64)
            u = (X[nb_] - z) / h
            nrm = (z - c0) / np.linalg.norm(z - c0)
            depth = -(u @ nrm)
            A = np.column_stack([np.ones(nb_.size), u, depth ** 2])
            sw = np.exp(-0.5 * decay * np.sum(u * u, axis=1))
            pinv = np.linalg.pinv(A * sw[:, None]) * sw[None, :]
            idx_list.append(nb_)
            w_list.append(pinv[0])
        return idx_list, w_list

    def at_boundary(self, rows, points) -> np.ndarray:
        """M(x, z) for x in ``rows`` (cell indices) and boundary points z."""
        rows = np.atleast_1d(rows)
        idx, wts = self.boundary_weights(points)
        out = np.empty((rows.size, len(idx)))
        for k, (ii, ww) in enumerate(zip(idx, wts)):
            out[:, k] = self.M[np.ix_(rows, ii)] @ ww
        return out


def martin_kernel(gm: GreenMatrix, ref: int) -> MartinKernel:
    dl = gm.mesh.delta
    if dl[ref] < gm.mesh.domain.radius / 2 * (1 - 1e-12):
        raise ValueError("reference cell must satisfy delta_B >= R/2")
    col = gm.G[ref]
    if np.any(col <= np.finfo(float).tiny):
        raise DegenerateColumn("G[x0, j] underflows for some j")
    M = gm.G / col[None, :]
    M[ref] = 1.0
    return MartinKernel(gm, ref, M)


def martin_oscillation(mk: MartinKernel, row: int, center_dir, cap_angles: Sequence[float]) -> np.ndarray:
    """Oscillation (max - min) of M(x, .) over boundary links inside shrinking caps."""
    gen = mk.gm.gen
    dom = mk.gm.mesh.domain
    u = np.asarray(center_dir, dtype=float)
    u = u / np.linalg.norm(u)
    pts = gen.link_pt
    dirs = (pts - dom.center) / np.linalg.norm(pts - dom.center, axis=1, keepdims=True)
    ang = np.arccos(np.clip(dirs @ u, -1, 1))
    out = []
    for a in cap_angles:
        sel = ang <= a
        if sel.sum() < 1:
            out.append(0.0)
            continue
        vals = mk.at_boundary([row], pts[sel])[0]
        out.append(float(vals.max() - vals.min()))
    return np.array(out)


@dataclass
class DensityCheck:
    lhs: np.ndarray
    rhs: np.ndarray
    gap: float
    rel_gap: float
    mode: str


def harmonic_measure_density_check(gm: GreenMatrix, x: int, ref: int, caps=None,
                                   mode: str = "extrapolated", mk: MartinKernel | None = None) -> DensityCheck:
    """Compare omega(x, A) with sum over continuous exits of M(x, z) omega(ref, dz).

    ``mode='adjacent'`` uses M at the exiting cell (an exact chain identity);
    ``mode='extrapolated'`` uses the boundary limit of M at the exit point.
    ``caps`` is a list of index arrays of partition caps (default: each cap).
    """
    gen = gm.gen
    part = gen.partition
    if caps is None:
        caps = [[c] for c in range(part.n_caps)]
    vol = gm.mesh.volume
    mk = mk or martin_kernel(gm, ref)
    lcap = part.classify(gen.link_pt, False)
    # contribution of every link to omega(ref, .)
    w_ref = vol * gm.G[ref, gen.link_cell] * gen.link_rate
    w_x = vol * gm.G[x, gen.link_cell] * gen.link_rate
    if mode == "adjacent":
        mz = mk.M[x, gen.link_cell]
    else:
        mz = mk.at_boundary([x], gen.link_pt)[0]
    lhs, rhs = [], []
    for A in caps:
        sel = np.isin(lcap, A)
        lhs.append(float(np.sum(w_x[sel])))
        rhs.append(float(np.sum(mz[sel] * w_ref[sel])))
    lhs, rhs = np.array(lhs), np.array(rhs)
    gap = float(np.max(np.abs(lhs - rhs)))
    return DensityCheck(lhs, rhs, gap, gap / max(float(np.max(lhs)), 1e-300), mode)


@dataclass
class LevyCheck:
    chain: float
    green_product: float
    gap: float


def levy_exit_identity_check(gm: GreenMatrix, x: int, targets) -> LevyCheck:
    """Jump-exit mass into a union of partition cells: LU solve vs h^d G @ rates."""
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    rate = gm.gen.absorption_jump[:, targets].sum(axis=1)
    A = -gm.gen.L
    chain = float(np.linalg.solve(A, rate)[x])
    prod = float(gm.mesh.volume * gm.G[x] @ rate)
    return LevyCheck(chain, prod, abs(chain - prod))


# --------------------------------------------------------------- export

MAGIC = b"JLGREEN1\n"


def save_matrix(path, M: np.ndarray, mesh: Mesh, extra: Optional[dict] = None):
    """Binary layout: magic, u64 header length, JSON header, int64 coords, float64 matrix (little endian)."""
    hdr = {"d": mesh.d, "h": repr(mesh.h), "n": mesh.n, "center": [repr(float(c)) for c in mesh.domain.center],
           "R": repr(mesh.domain.radius), "shape": list(M.shape)}
    if extra:
        hdr["extra"] = extra
    hb = json.dumps(hdr, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(np.ascontiguousarray(mesh.coords, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(M, dtype="<f8").tobytes())


def load_matrix(path):
    """Returns (matrix, coords, header)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise ValueError("not a jumplab matrix file")
    off = len(MAGIC)
    (hl,) = struct.unpack("<Q", raw[off:off + 8])
    off += 8
    hdr = json.loads(raw[off:off + hl].decode())
    off += hl
    n, d = hdr["n"], hdr["d"]
    coords = np.frombuffer(raw, dtype="<i8", count=n * d, offset=off).reshape(n, d).copy()
    off += 8 * n * d
    shape = tuple(hdr["shape"])
    M = np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)), offset=off).reshape(shape).copy()
    hdr["h"] = float(hdr["h"])
    hdr["R"] = float(hdr["R"])
    hdr["center"] = [float(c) for c in hdr["center"]]
    return M, coords, hdr


def save_triplets(path, M: np.ndarray, tol: float = 0.0):
    """Text lines 'i j value' with shortest round-trip decimals; zero entries skipped."""
    with open(path, "w") as fh:
        fh.write(f"# shape {M.shape[0]} {M.shape[1]}\n")
        I, J = np.nonzero(np.abs(M) > tol)
        for i, j in zip(I.tolist(), J.tolist()):
            fh.write(f"{i} {j} {float(M[i, j])!r}\n")


def load_triplets(path) -> np.ndarray:
    with open(path) as fh:
        head = fh.readline().split()
        M = np.zeros((int(head[2]), int(head[3])))
        for line in fh:
            i, j, v = line.split()
            M[int(i), int(j)] = float(v)
    return M
