"""Monte-Carlo estimators over exit records and the inequality reporters."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numba as nb
import numpy as np

from .errors import (ExcessiveCensoring, HeavyTailWarning, NoCertificate,
                     NonPositiveValue, ReferenceDegenerate, UnboundedBoundaryData)
from .fields import Potential
from .geometry import BallDomain, BoundaryChart, Region
from .model import OperatorModel
from .partition import ExitPartition
from .sim import ExitBatch, PathConfig, simulate_batch

MAX_CENSORED = 0.01
KURTOSIS_CEILING = 500.0


# ------------------------------------------------------------ accumulators


@nb.njit(cache=True)
def _grow(partials, n, x):
    # Shewchuk's exact summation: partials[:n] is a nonoverlapping expansion
    i = 0
    for j in range(n):
        y = partials[j]
        if abs(x) < abs(y):
            x, y = y, x
        hi = x + y
        lo = y - (hi - x)
        if lo != 0.0:
            partials[i] = lo
            i += 1
        x = hi
    partials[i] = x
    return i + 1


@nb.njit(cache=True)
def _exact_partials(values, init, n_init):
    buf = np.zeros(values.shape[0] + n_init + 2)
    for k in range(n_init):
        buf[k] = init[k]
    n = n_init
    for v in values:
        n = _grow(buf, n, v)
    return buf[:n].copy()


class RunningStats:
    """Mergeable count / mean / M2 accumulator.

    The sum is kept exactly as a floating-point expansion, so the mean of any
    merge order equals the correctly rounded total divided by n.  M2 is merged
    with the pairwise update and agrees across orders to round-off.
    """

    __slots__ = ("n", "_partials", "m2")

    def __init__(self):
        self.n = 0
        self._partials = np.zeros(0)
        self.m2 = 0.0

    @classmethod
    def of(cls, values) -> "RunningStats":
        rs = cls()
        rs.push(values)
        return rs

    @property
    def total(self) -> float:
        return math.fsum(self._partials)

    @property
    def mean(self) -> float:
        return self.total / self.n if self.n else 0.0

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0

    def push(self, values) -> "RunningStats":
        v = np.ascontiguousarray(np.atleast_1d(np.asarray(values, dtype=float)))
        if v.size == 0:
            return self
        other = RunningStats()
        other.n = v.size
        other._partials = _exact_partials(v, np.zeros(0), 0)
        mu = other.mean
        other.m2 = float(np.sum((v - mu) ** 2))
        return self.merge(other, inplace=True)

    def merge(self, other: "RunningStats", inplace: bool = False) -> "RunningStats":
        out = self if inplace else RunningStats()
        if other.n == 0:
            if not inplace:
                out.n, out._partials, out.m2 = self.n, self._partials.copy(), self.m2
            return out
        if self.n == 0:
            out.n, out._partials, out.m2 = other.n, other._partials.copy(), other.m2
            return out
        na, nb_ = self.n, other.n
        delta = other.mean - self.mean
        n = na + nb_
        m2 = self.m2 + other.m2 + delta * delta * na * nb_ / n
        parts = _exact_partials(other._partials, self._partials, self._partials.size)
        out.n, out._partials, out.m2 = n, parts, m2
        return out

    def estimate(self, censored: int = 0) -> "Estimate":
        se = math.sqrt(self.variance / self.n) if self.n > 1 else 0.0
        return Estimate(self.mean, se, self.n, censored)

    def __repr__(self) -> str:
        return f"RunningStats(n={self.n}, mean={self.mean!r}, m2={self.m2!r})"


@dataclass
class Estimate:
    value: float
    stderr: float
    n: int
    censored_count: int = 0
    flagged: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def censored_fraction(self) -> float:
        tot = self.n + self.censored_count
        return self.censored_count / tot if tot else 0.0

    def within(self, target: float, k: float = 3.0, slack: float = 0.0) -> bool:
        return abs(self.value - target) <= k * self.stderr + slack

    def scaled(self, lam: float) -> "Estimate":
        return Estimate(lam * self.value, abs(lam) * self.stderr, self.n, self.censored_count,
                        self.flagged, dict(self.extra))


@dataclass
class HarmonicMeasureEstimate:
    partition: ExitPartition
    counts: np.ndarray
    n_total: int
    censored_count: int
    n_continuous: int
    n_jump: int

    @property
    def n_used(self) -> int:
        return self.n_total - self.censored_count

    @property
    def masses(self) -> np.ndarray:
        """Per-cell probability; uncensored mass plus censored fraction is 1."""
        return self.counts / self.n_total

    @property
    def censored_fraction(self) -> float:
        return self.censored_count / self.n_total

    @property
    def stderr(self) -> np.ndarray:
        p = self.masses
        return np.sqrt(p * (1 - p) / self.n_total)

    @property
    def cap_masses(self) -> np.ndarray:
        return self.masses[: self.partition.n_caps]

    @property
    def far_mass(self) -> float:
        return float(self.masses[self.partition.far_index])

    @property
    def p_continuous(self) -> float:
        return self.n_continuous / self.n_used if self.n_used else 0.0

    @property
    def p_jump(self) -> float:
        return self.n_jump / self.n_used if self.n_used else 0.0

    def uniform_caps_chi2(self) -> tuple[float, float]:
        """Chi-square statistic and p-value of continuous-exit caps vs equal solid angle."""
        from scipy.stats import chisquare
        obs = self.counts[: self.partition.n_caps]
        exp = obs.sum() * self.partition.cap_solid_fraction()
        res = chisquare(obs, exp)
        return float(res.statistic), float(res.pvalue)


# ------------------------------------------------------------- simulation


def run_paths(x, domain: Region, model: OperatorModel, cfg: PathConfig, n_paths: int,
              potentials: Sequence[Potential] | None = None, workers: int = 1,
              stream: int = 0, max_censored: float = MAX_CENSORED) -> ExitBatch:
    """Simulate and enforce the censoring ceiling."""
    b = simulate_batch(x, domain, model, cfg, n_paths, potentials=potentials, stream=stream,
                       workers=workers)
    frac = float(b.censored.mean())
    if frac > max_censored:
        raise ExcessiveCensoring(f"{frac:.2%} of paths censored at t_max={b.meta['t_max']:g}")
    return b


def _batch(batch, x, domain, model, cfg, n_paths, potentials, workers, stream):
    if batch is not None:
        return batch
    return run_paths(x, domain, model, cfg, n_paths, potentials=potentials, workers=workers,
                     stream=stream)


def _mean_of(values: np.ndarray, ok: np.ndarray, censored: int) -> Estimate:
    return RunningStats.of(values[ok]).estimate(censored)


def expected_exit_time(x, domain: Region, model: OperatorModel, cfg: PathConfig,
                       n_paths: int = 100_000, workers: int = 1, stream: int = 0,
                       batch: ExitBatch | None = None) -> Estimate:
    b = _batch(batch, x, domain, model, cfg, n_paths, None, workers, stream)
    est = _mean_of(b.tau, b.ok, int(b.censored.sum()))
    scale = domain.radius if isinstance(domain, BallDomain) else domain.scale
    est.extra["ratio_R2"] = est.value / (scale * scale)
    return est


def harmonic_measure(x, domain: BallDomain, model: OperatorModel, cfg: PathConfig,
                     partition: ExitPartition, n_paths: int = 100_000, workers: int = 1,
                     stream: int = 0, batch: ExitBatch | None = None) -> HarmonicMeasureEstimate:
    b = _batch(batch, x, domain, model, cfg, n_paths, None, workers, stream)
    ok = b.ok
    cells = partition.classify(b.x_exit[ok], b.via_jump[ok])
    counts = np.bincount(cells, minlength=partition.n_cells).astype(float)
    nj = int(b.via_jump[ok].sum())
    return HarmonicMeasureEstimate(partition, counts, len(b), int((~ok).sum()), int(ok.sum()) - nj, nj)


def _boundary_values(f: Callable, b: ExitBatch, bound: float) -> np.ndarray:
    v = np.asarray(f(b.x_exit), dtype=float)
    if v.shape != (len(b),):
        v = np.broadcast_to(v, (len(b),)).astype(float)
    if np.any(~np.isfinite(v)) or np.max(np.abs(v)) > bound:
        raise UnboundedBoundaryData(f"|f| exceeds the bound {bound:g} on sampled exit points")
    return v


def solve_dirichlet(x, f: Callable, domain: Region, model: OperatorModel, cfg: PathConfig,
                    n_paths: int = 100_000, bound: float = 1e6, workers: int = 1,
                    stream: int = 0, batch: ExitBatch | None = None) -> Estimate:
    """E^x f(X_tau); ``f`` maps an (n, d) array of exit points to n values."""
    b = _batch(batch, x, domain, model, cfg, n_paths, None, workers, stream)
    v = _boundary_values(f, b, bound)
    return _mean_of(v, b.ok, int(b.censored.sum()))


def _check_tails(w: np.ndarray, ceiling: float) -> float:
    if w.size < 4:
        return 0.0
    mu = w.mean()
    s2 = np.mean((w - mu) ** 2)
    if s2 <= 0.0:
        return 0.0
    kurt = float(np.mean((w - mu) ** 4) / (s2 * s2))
    if kurt > ceiling:
        warnings.warn(f"e_q weights have kurtosis {kurt:.3g} > {ceiling:g}; the gauge may be near-infinite",
                      HeavyTailWarning, stacklevel=3)
    return kurt


def _q_column(b: ExitBatch, qi: int) -> np.ndarray:
    return b.q_integral[:, qi]


def gauge(x, q: Potential, domain: Region, model: OperatorModel, cfg: PathConfig,
          n_paths: int = 100_000, workers: int = 1, stream: int = 0,
          batch: ExitBatch | None = None, q_index: int = 0,
          kurtosis_ceiling: float = KURTOSIS_CEILING) -> Estimate:
    """E^x exp(int_0^tau q(X_s) ds)."""
    b = _batch(batch, x, domain, model, cfg, n_paths, [q], workers, stream)
    w = np.exp(_q_column(b, q_index))
    est = _mean_of(w, b.ok, int(b.censored.sum()))
    est.extra["kurtosis"] = _check_tails(w[b.ok], kurtosis_ceiling)
    return est


def solve_schrodinger(x, f: Callable, q: Potential, domain: Region, model: OperatorModel,
                      cfg: PathConfig, n_paths: int = 100_000, gaugeable: Optional[bool] = None,
                      bound: float = 1e6, workers: int = 1, stream: int = 0,
                      batch: ExitBatch | None = None, q_index: int = 0,
                      kurtosis_ceiling: float = KURTOSIS_CEILING) -> Estimate:
    """E^x[e_q(tau) f(X_tau)].

    ``gaugeable`` records whether a certificate or grid check backs the solve;
    anything but True proceeds with a warning and a flagged estimate.
    """
    flagged = gaugeable is not True and not q.is_zero
    if flagged:
        warnings.warn("no gaugeability certificate supplied; the Feynman-Kac solution may be infinite",
                      UserWarning, stacklevel=2)
    b = _batch(batch, x, domain, model, cfg, n_paths, [q], workers, stream)
    w = np.exp(_q_column(b, q_index)) * _boundary_values(f, b, bound)
    est = _mean_of(w, b.ok, int(b.censored.sum()))
    est.flagged = flagged
    est.extra["kurtosis"] = _check_tails(w[b.ok], kurtosis_ceiling)
    return est


@dataclass
class Certificate:
    eta: float
    bound: float
    probe_values: list


def khasminskii_certificate(q: Potential, domain: Region, model: OperatorModel, cfg: PathConfig,
                            n_paths: int, probes, workers: int = 1, stream: int = 0,
                            upper: bool = True, batches: Sequence[ExitBatch] | None = None,
                            q_index: int = 0):
    """eta = max over probes of E^x int_0^tau |q(X_s)| ds; bound 1/(1 - eta) if eta < 1.

    With ``upper`` the estimate plus three standard errors is used, so the bound
    is conservative against Monte-Carlo noise.  ``batches`` (one per probe,
    simulated with q at ``q_index``) replaces the simulation.
    """
    vals = []
    for i, p in enumerate(np.atleast_2d(probes)):
        if batches is not None:
            b = batches[i]
        else:
            b = run_paths(p, domain, model, cfg, n_paths, potentials=[q], workers=workers,
                          stream=stream + i)
        vals.append(_mean_of(b.q_abs[:, q_index], b.ok, int(b.censored.sum())))
    eta = max(v.value + (3.0 * v.stderr if upper else 0.0) for v in vals)
    if eta >= 1.0:
        return NoCertificate(eta)
    return Certificate(eta, 1.0 / (1.0 - eta), vals)


# --------------------------------------------------------------- reporters


def _ratio_se(num: Estimate, den: Estimate) -> float:
    r = num.value / den.value
    return abs(r) * math.sqrt((num.stderr / num.value) ** 2 + (den.stderr / den.value) ** 2)


def _require_positive(ests: Sequence[Estimate], exc=NonPositiveValue):
    for i, e in enumerate(ests):
        if e.value - 3.0 * e.stderr <= 0.0:
            raise exc(f"estimate {i} = {e.value:.6g} +- {e.stderr:.3g} is not safely positive")


def _evaluate(u, points) -> list:
    if callable(u):
        return [u(p) for p in points]
    return list(u)


@dataclass
class RatioReport:
    ratio: float
    stderr: float
    witness: tuple
    values: list
    extra: dict = field(default_factory=dict)


def harnack_report(u, domain: BallDomain, probes) -> RatioReport:
    """sup/inf of u over probes in the closed half ball B(x0, R/2).

    ``u`` is a callable point -> Estimate or a sequence of Estimates aligned
    with ``probes``.  The witness is (argmax, argmin), first index on ties.
    """
    P = np.atleast_2d(np.asarray(probes, dtype=float))
    if np.any(np.linalg.norm(P - domain.center, axis=1) > domain.radius / 2 * (1 + 1e-12)):
        raise ValueError("probes must lie in the closed ball B(x0, R/2)")
    ests = _evaluate(u, P)
    _require_positive(ests)
    v = np.array([e.value for e in ests])
    i, j = int(np.argmax(v)), int(np.argmin(v))
    ratio = float(v[i] / v[j])
    se = 0.0 if i == j else _ratio_se(ests[i], ests[j])
    return RatioReport(ratio, se, (i, j), ests)


def carleson_reference(chart: BoundaryChart, r: float) -> np.ndarray:
    """Interior point on the inward normal through Q with rho_Q = r/2."""
    return chart.normal_point(r / 2.0)


def _check_local(chart: BoundaryChart, r: float, P: np.ndarray):
    if not r < chart.R1 / 2.0:
        raise ValueError("r must be smaller than R1/2")
    far = np.linalg.norm(P - chart.Q, axis=1) > r / 2.0 * (1 + 1e-12)
    outside = chart.domain.delta(P) <= 0
    if np.any(far | outside):
        raise ValueError("probes must lie in B cap B(Q, r/2)")


def carleson_report(chart: BoundaryChart, r: float, u, probes, ref: Estimate | None = None) -> RatioReport:
    """max over probes of u(x)/u(x_r) with x_r on the inward normal at rho = r/2."""
    P = np.atleast_2d(np.asarray(probes, dtype=float))
    _check_local(chart, r, P)
    xr = carleson_reference(chart, r)
    if ref is None:
        if not callable(u):
            raise ValueError("pass ref when u is a sequence of estimates")
        ref = u(xr)
    if ref.value - 3.0 * ref.stderr <= 0.0:
        raise ReferenceDegenerate(f"u(x_r) = {ref.value:.6g} +- {ref.stderr:.3g} is not safely positive")
    ests = _evaluate(u, P)
    v = np.array([e.value for e in ests])
    i = int(np.argmax(v))
    return RatioReport(float(v[i] / ref.value), _ratio_se(ests[i], ref) if v[i] > 0 else 0.0,
                       (i,), ests, {"x_r": xr, "ref": ref})


def bhp_report(chart: BoundaryChart, r: float, u, pairs, floor: float = 0.0) -> RatioReport:
    """max over pairs (x, y) of [u(x)/delta(x)] / [u(y)/delta(y)]."""
    pairs = [(np.asarray(a, dtype=float), np.asarray(b, dtype=float)) for a, b in pairs]
    pts = []
    index = {}
    for a, b in pairs:
        for p in (a, b):
            key = tuple(p.tolist())
            if key not in index:
                index[key] = len(pts)
                pts.append(p)
    P = np.array(pts)
    _check_local(chart, r, P)
    delta = chart.domain.delta(P)
    if np.any(delta <= floor):
        raise ValueError("all probes need delta_B above the resolution floor")
    ests = _evaluate(u, P)
    _require_positive(ests)
    best, wit, se = -math.inf, None, 0.0
    for k, (a, b) in enumerate(pairs):
        ia, ib = index[tuple(a.tolist())], index[tuple(b.tolist())]
        val = (ests[ia].value / delta[ia]) / (ests[ib].value / delta[ib])
        if val > best:
            best, wit = val, (k, ia, ib)
            se = 0.0 if ia == ib else _ratio_se(ests[ia], ests[ib]) * delta[ib] / delta[ia]
    return RatioReport(float(best), float(se), wit, ests, {"points": P, "delta": delta})


def double_ratio_report(u_ests: Sequence[Estimate], v_ests: Sequence[Estimate]) -> RatioReport:
    """sup/inf over probes of u/v for two functions vanishing on the same boundary piece."""
    _require_positive(u_ests)
    _require_positive(v_ests)
    r = np.array([a.value / b.value for a, b in zip(u_ests, v_ests)])
    i, j = int(np.argmax(r)), int(np.argmin(r))
    return RatioReport(float(r[i] / r[j]), 0.0, (i, j), list(zip(u_ests, v_ests)), {"ratios": r})


@dataclass
class LinearityTable:
    depth: np.ndarray
    p_box: np.ndarray
    p_box_se: np.ndarray
    p_in_B: np.ndarray
    p_in_B_se: np.ndarray
    slope_box: float
    slope_in_B: float
    max_rel_residual: float
    truncated: bool

    def rows(self) -> list[dict]:
        return [{"depth": float(self.depth[i]), "p_box": float(self.p_box[i]),
                 "p_box_se": float(self.p_box_se[i]), "p_in_B": float(self.p_in_B[i]),
                 "p_in_B_se": float(self.p_in_B_se[i]), "truncated": self.truncated}
                for i in range(self.depth.size)]


def _fit_origin(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    s = float(np.dot(x, y) / np.dot(x, x))
    fit = s * x
    res = float(np.max(np.abs(y - fit) / np.maximum(fit, 1e-300)))
    return s, res


def boundary_exit_linearity(chart: BoundaryChart, model: OperatorModel, cfg: PathConfig,
                            depths, n_paths: int = 100_000, workers: int = 1,
                            stream: int = 0, delta0: float | None = None,
                            batches: Sequence[ExitBatch] | None = None) -> LinearityTable:
    """Exit law of D_Q(delta0, r0) from points on the inward normal through Q.

    Reports P(X_tau in D_Q(2 delta0, r0)) and P(X_tau in B) per depth with
    slopes fitted through the origin.  ``cfg`` should already be scaled to
    the box; its ``truncated`` flag selects the truncated process.
    """
    d0 = chart.delta0 if delta0 is None else delta0
    r0 = chart.r0
    box = chart.box(d0, r0)
    depths = np.asarray(depths, dtype=float)
    if np.any(depths >= d0) or np.any(depths <= 0):
        raise ValueError("depths must lie in (0, delta0)")
    pb, pbs, pi, pis = [], [], [], []
    for k, dep in enumerate(depths):
        x = chart.normal_point(dep)
        if batches is not None:
            b = batches[k]
        else:
            b = run_paths(x, box, model, cfg, n_paths, potentials=[Potential.zero()],
                          workers=workers, stream=stream + k)
        ok = b.ok
        land = b.x_exit[ok]
        in_box = chart.in_box(land, 2 * d0, r0).astype(float)
        in_b = (chart.domain.delta(land) > 0).astype(float)
        e1 = RunningStats.of(in_box).estimate()
        e2 = RunningStats.of(in_b).estimate()
        pb.append(e1.value)
        pbs.append(e1.stderr)
        pi.append(e2.value)
        pis.append(e2.stderr)
    pb, pi = np.array(pb), np.array(pi)
    s1, r1 = _fit_origin(depths, pb)
    s2, r2 = _fit_origin(depths, pi)
    return LinearityTable(depths, pb, np.array(pbs), pi, np.array(pis), s1, s2, max(r1, r2),
                          cfg.truncated)
