"""Operator models, presets and numerical checks of the standing assumptions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import (ConfigError, NonPositiveDefinite, NonSymmetricMatrix,
                     QuadratureNonConvergent)
from .fields import Diffusion, JumpKernel, Potential
from .geometry import (BallDomain, BallIntersection, BoundaryChart, ChartBox,
                       sphere_quadrature)

__all__ = [
    "OperatorModel", "BallDomain", "BallIntersection", "BoundaryChart", "ChartBox",
    "preset", "PRESETS", "parse_potential", "ellipticity_bounds", "kato_norm",
    "kernel_sandwich_check", "SandwichReport", "chart_rho", "chart_box_contains",
]

SYM_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class OperatorModel:
    """Coefficients of the jump-diffusion generator plus a potential.

    ``diffusion_enabled``/``jumps_enabled`` switch off one half of the operator
    for diagnostics; a model with either switched off is not in paper mode.
    """

    d: int
    diffusion: Diffusion
    kernel: JumpKernel
    potential: Potential = field(default_factory=Potential.zero)
    diffusion_enabled: bool = True
    jumps_enabled: bool = True
    label: str = "custom"

    def __post_init__(self):
        if int(self.d) < 3:
            raise ConfigError("d: dimension must be >= 3")
        if not 0.0 < self.kernel.alpha < 2.0:
            raise ConfigError("alpha: must lie in (0, 2)")
        if not self.kernel.c > 0.0:
            raise ConfigError("c: must be positive")
        if not (self.diffusion_enabled or self.jumps_enabled):
            raise ConfigError("model has neither diffusion nor jumps")

    @property
    def paper_mode(self) -> bool:
        return self.diffusion_enabled and self.jumps_enabled

    @property
    def c(self) -> float:
        return self.kernel.c

    @property
    def alpha(self) -> float:
        return self.kernel.alpha

    def with_potential(self, q: Potential) -> "OperatorModel":
        return replace(self, potential=q)

    def diffusion_matrix(self, x) -> np.ndarray:
        return self.diffusion.matrix(x)

    def describe(self) -> dict:
        return {
            "label": self.label, "d": self.d, "diffusion": self.diffusion.name,
            "kernel": self.kernel.name, "c": self.c, "alpha": self.alpha,
            "potential": self.potential.name, "diffusion_enabled": self.diffusion_enabled,
            "jumps_enabled": self.jumps_enabled, "paper_mode": self.paper_mode,
        }


PRESETS = ("identity", "variable-spd", "brownian-diagnostic", "stable-diagnostic")


def parse_potential(spec: str, d: int = 3) -> Potential:
    """Parse ``zero``, ``const:<v>`` or ``bump:<c1,..,cd>:<radius>:<height>``."""
    s = spec.strip()
    if s == "zero":
        return Potential.zero()
    parts = s.split(":")
    try:
        if parts[0] == "const" and len(parts) == 2:
            return Potential.const(float(parts[1]))
        if parts[0] == "bump" and len(parts) == 4:
            c = np.array([float(v) for v in parts[1].split(",")])
            if c.size != d:
                raise ConfigError(f"q: bump center has {c.size} coordinates, expected {d}")
            return Potential.bump(c, float(parts[2]), float(parts[3]))
    except ValueError as exc:
        raise ConfigError(f"q: cannot parse {spec!r}: {exc}") from None
    raise ConfigError(f"q: unknown potential preset {spec!r}")


def preset(name: str, d: int = 3, c: float = 1.0, alpha: float = 1.0,
           potential: Potential | str | None = None, spd_eps: float = 0.1) -> OperatorModel:
    """Named model presets used by scenario files."""
    if potential is None:
        q = Potential.zero()
    elif isinstance(potential, str):
        q = parse_potential(potential, d)
    else:
        q = potential
    k = JumpKernel.default(c, alpha)
    if name == "identity":
        return OperatorModel(d, Diffusion.identity(), k, q, label=name)
    if name == "variable-spd":
        return OperatorModel(d, Diffusion.variable_spd(spd_eps), k, q, label=name)
    if name == "brownian-diagnostic":
        return OperatorModel(d, Diffusion.identity(), k, q, jumps_enabled=False, label=name)
    if name == "stable-diagnostic":
        return OperatorModel(d, Diffusion.identity(), k, q, diffusion_enabled=False, label=name)
    raise ConfigError(f"model: unknown preset {name!r}; expected one of {', '.join(PRESETS)}")


def ellipticity_bounds(model: OperatorModel, samples) -> tuple[float, float]:
    """Smallest and largest eigenvalue of a(x) over the sample points."""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("samples must be nonempty")
    A = model.diffusion.matrices(X)
    scale = np.maximum(np.abs(A).max(axis=(1, 2)), 1e-300)
    asym = np.abs(A - np.swapaxes(A, 1, 2)).max(axis=(1, 2)) / scale
    bad = np.flatnonzero(asym > SYM_TOL)
    if bad.size:
        i = bad[0]
        raise NonSymmetricMatrix(f"a(x) not symmetric at sample {i} (relative asymmetry {asym[i]:.3g})")
    ev = np.linalg.eigvalsh(A)
    lo, hi = float(ev[:, 0].min()), float(ev[:, -1].max())
    if lo <= 0.0:
        raise NonPositiveDefinite(f"a(x) has eigenvalue {lo:.6g} <= 0")
    return lo, hi


def default_probes(domain: BallDomain, spacing: float) -> np.ndarray:
    """Cubic lattice centred at x0 with the given spacing, restricted to the closed ball."""
    d, R = domain.d, domain.radius
    n = int(math.floor(R / spacing + 1e-12))
    ax = np.arange(-n, n + 1) * spacing
    G = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    G = G[np.linalg.norm(G, axis=1) <= R * (1 + 1e-12)]
    pts = domain.center + G
    # the center is the origin of the lattice and is always included
    return pts


def _kato_level(q: Potential, r: float, probes: np.ndarray, nshell: int, nang: int, ngl: int = 4):
    d = probes.shape[1]
    dirs, wdir = sphere_quadrature(d, nang)
    t, w = np.polynomial.legendre.leggauss(ngl)
    edges = np.linspace(0.0, r, nshell + 1)
    lo, hi = edges[:-1], edges[1:]
    rad = (0.5 * (hi - lo)[:, None] * (t[None, :] + 1.0) + lo[:, None]).ravel()
    # integrand in polar form: rho^{d-1} |y|^{2-d} = rho, Gauss weights per shell
    wrad = (0.5 * (hi - lo)[:, None] * w[None, :]).ravel() * rad
    offs = (rad[:, None, None] * dirs[None, :, :]).reshape(-1, d)
    wts = (wrad[:, None] * wdir[None, :]).ravel()
    out = np.empty(probes.shape[0])
    chunk = max(1, 2_000_000 // offs.shape[0])
    for s in range(0, probes.shape[0], chunk):
        P = probes[s:s + chunk]
        Y = (P[:, None, :] + offs[None, :, :]).reshape(-1, d)
        vals = np.abs(q(Y)).reshape(P.shape[0], -1)
        out[s:s + chunk] = vals @ wts
    return out


def kato_norm(q: Potential, r: float, domain: BallDomain | None = None, probes=None,
              d: int | None = None, tol: float = 1e-6, max_levels: int = 6,
              nshell0: int = 4, nang0: int = 6, return_probe: bool = False):
    """max over probes x of the integral of |q(y)| |x - y|^(2-d) over |y - x| < r.

    Radial shells with the polar weight folded in analytically, product rules on
    the sphere; levels double both resolutions until two successive values agree
    to ``tol`` relative to the largest probe value.  After each level only probes
    within a factor 2 of the running max are refined.  Probes default to a
    lattice of spacing r/4 over the closed ball plus its center.
    """
    if not r > 0:
        raise ValueError("r must be positive")
    if probes is None:
        if domain is None:
            domain = BallDomain(np.zeros(d or 3), 0.5)
        probes = default_probes(domain, min(r / 4.0, domain.radius))
    P = np.atleast_2d(np.asarray(probes, dtype=float))
    dim = P.shape[1]
    if dim < 3:
        raise ValueError("d must be >= 3")
    if q.is_zero:
        return (0.0, P[0]) if return_probe else 0.0
    prev = None
    active = np.arange(P.shape[0])
    for lev in range(max_levels):
        vals = _kato_level(q, r, P[active], nshell0 * 2 ** lev, nang0 * 2 ** lev)
        top = float(np.max(vals))
        if prev is not None:
            scale = max(top, 1e-300)
            if np.max(np.abs(vals - prev)) <= tol * scale:
                i = int(np.argmax(vals))
                return (top, P[active[i]]) if return_probe else top
        # constant potentials are integrated exactly at every level
        if q.code == 1:
            i = int(np.argmax(vals))
            return (top, P[active[i]]) if return_probe else top
        # probes far below the running max cannot become the maximizer
        keep = vals >= 0.5 * top
        active = active[keep]
        prev = vals[keep]
    raise QuadratureNonConvergent(
        f"Kato quadrature did not settle within {max_levels} levels (tol {tol:g})")


@dataclass
class SandwichReport:
    n_pairs: int
    violations: int
    lower_violations: int
    upper_violations: int
    symmetry_violations: int
    worst_ratio: float
    worst_pair: Optional[tuple] = None


def kernel_sandwich_check(model: OperatorModel, pairs, sym_tol: float = 1e-12) -> SandwichReport:
    """Check c <= J(x,y)|x-y|^(d+alpha) <= 1/c and J(x,y) = J(y,x) at pairs.

    The worst ratio is the normalized value J|x-y|^(d+alpha) furthest outside
    [c, 1/c] (or furthest from 1 when nothing violates).
    """
    X, Y = (np.asarray(a, dtype=float) for a in pairs) if isinstance(pairs, tuple) else (
        np.asarray([p[0] for p in pairs], dtype=float), np.asarray([p[1] for p in pairs], dtype=float))
    X, Y = np.atleast_2d(X), np.atleast_2d(Y)
    n = X.shape[0]
    k = model.kernel
    c, a, d = k.c, k.alpha, X.shape[1]
    if k.is_default:
        return SandwichReport(n, 0, 0, 0, 0, 1.0, None)
    dist = np.linalg.norm(X - Y, axis=1)
    if np.any(dist == 0):
        raise ValueError("pairs must not contain coincident points")
    jxy = k(X, Y)
    jyx = k(Y, X)
    ratio = jxy * dist ** (d + a)
    lo_b, hi_b = min(c, 1.0 / c), max(c, 1.0 / c)
    low = ratio < lo_b
    up = ratio > hi_b
    sym = np.abs(jxy - jyx) > sym_tol * np.maximum(np.abs(jxy), 1e-300)
    excess = np.maximum(lo_b / ratio, ratio / hi_b)
    i = int(np.argmax(excess)) if (low | up).any() else int(np.argmax(np.abs(np.log(ratio))))
    return SandwichReport(n, int((low | up | sym).sum()), int(low.sum()), int(up.sum()),
                          int(sym.sum()), float(ratio[i]), (X[i].copy(), Y[i].copy()))


def chart_rho(chart: BoundaryChart, y, frame: str = "world"):
    """rho_Q(y) = y_d - phi(y~); ``frame='chart'`` takes chart coordinates."""
    return chart.rho(y, frame=frame)


def chart_box_contains(chart: BoundaryChart, y, r1: float, r2: float):
    return chart.in_box(y, r1, r2)
