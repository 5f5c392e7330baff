"""Path simulation of the jump diffusion until it leaves a region.

Diffusion moves by Euler steps with covariance a(x) dt and drift
b_j = 1/2 sum_i d_i a_ij; jumps of size >= eps arrive on an exponential clock
of rate lambda(eps) and are thinned against an envelope for non-default
kernels.  Jumps below eps are dropped or replaced by the Gaussian with the same
covariance.  Steps are halved near the boundary and an optional Brownian-bridge
test catches excursions between grid times.

Each path draws from its own Philox stream addressed by (seed, path, stream),
and batches are split into fixed chunks merged in order, so results do not
depend on how many worker threads run them.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba as nb
import numpy as np

from .errors import (ConfigError, RejectionStall, TimeBudgetExceeded,
                     UnsupportedKernel)
from .fields import (J_DEFAULT, Potential, diffusion_eval, diffusion_grad,
                     kernel_eval, potential_eval)
from .geometry import (BallDomain, Region, region_crossing, region_distance,
                       region_inside, sphere_area)
from .model import OperatorModel, ellipticity_bounds
from .rng import (STATE_WORDS, StreamFactory, next_exponential, next_normal,
                  next_uniform, stream_init)

CHUNK = 2048

SMALL_DROP = "drop"
SMALL_CORRECT = "diffusion-correction"

STATUS_OK = 0
STATUS_CENSORED = 1
STATUS_STALL = 2


@dataclass(frozen=True)
class PathConfig:
    """Discretization and budget of a path simulation.

    ``t_max=None`` means 1e4 * R^2 of the region being exited.
    """

    dt: float
    eps: float
    small_jumps: str = SMALL_CORRECT
    bridge: bool = True
    truncated: bool = False
    t_max: Optional[float] = None
    seed: int = 0
    halvings: int = 8
    accept_floor: float = 1e-3

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt: must be positive")
        if not 0 < self.eps < 1:
            raise ConfigError("eps: must lie in (0, 1)")
        if self.small_jumps not in (SMALL_DROP, SMALL_CORRECT):
            raise ConfigError(f"small_jumps: expected {SMALL_DROP!r} or {SMALL_CORRECT!r}")
        if self.t_max is not None and not self.t_max > 0:
            raise ConfigError("t_max: must be positive")
        if self.halvings < 0:
            raise ConfigError("halvings: must be >= 0")

    @classmethod
    def for_radius(cls, R: float, **kw) -> "PathConfig":
        """Defaults scaled to a ball of radius R: dt = R^2/500, eps = R/10."""
        kw.setdefault("dt", R * R / 500.0)
        kw.setdefault("eps", min(R / 10.0, 0.5))
        return cls(**kw)

    def scaled(self, factor: float) -> "PathConfig":
        """Same config for a region smaller by ``factor`` (dt by factor^2, eps by factor)."""
        from dataclasses import replace
        tm = None if self.t_max is None else self.t_max * factor * factor
        return replace(self, dt=self.dt * factor * factor, eps=self.eps * factor, t_max=tm)

    def budget(self, region: Region) -> float:
        s = region.scale if not isinstance(region, BallDomain) else region.radius
        return self.t_max if self.t_max is not None else 1e4 * s * s


@dataclass
class ExitRecord:
    tau: float
    x_pre: np.ndarray
    x_exit: np.ndarray
    via_jump: bool
    q_integral: float
    steps: int
    censored: bool = False
    n_jumps: int = 0

    @property
    def e_q(self) -> float:
        return math.exp(self.q_integral)


@dataclass
class ExitBatch:
    """Column arrays of exit records for paths ``path_index``."""

    tau: np.ndarray
    x_pre: np.ndarray
    x_exit: np.ndarray
    via_jump: np.ndarray
    status: np.ndarray
    q_integral: np.ndarray  # (n, n_potentials)
    q_abs: np.ndarray
    steps: np.ndarray
    n_jumps: np.ndarray
    path_index: np.ndarray
    occupation: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.tau.shape[0]

    @property
    def censored(self) -> np.ndarray:
        return self.status == STATUS_CENSORED

    @property
    def ok(self) -> np.ndarray:
        return self.status == STATUS_OK

    def head(self, n: int) -> "ExitBatch":
        """The first n paths (the occupation histogram is not split and is dropped)."""
        n = int(n)
        if n > len(self):
            raise ValueError("batch has fewer paths")
        return ExitBatch(self.tau[:n], self.x_pre[:n], self.x_exit[:n], self.via_jump[:n],
                         self.status[:n], self.q_integral[:n], self.q_abs[:n], self.steps[:n],
                         self.n_jumps[:n], self.path_index[:n], None, dict(self.meta))

    def record(self, i: int, k: int = 0) -> ExitRecord:
        qi = float(self.q_integral[i, k]) if self.q_integral.shape[1] else 0.0
        return ExitRecord(float(self.tau[i]), self.x_pre[i].copy(), self.x_exit[i].copy(),
                          bool(self.via_jump[i]), qi, int(self.steps[i]),
                          bool(self.status[i] == STATUS_CENSORED), int(self.n_jumps[i]))


# ------------------------------------------------------------------- kernel


@nb.njit(cache=True, inline="always")
def _chol(A, L):
    d = A.shape[0]
    for i in range(d):
        for j in range(d):
            L[i, j] = 0.0
    for j in range(d):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if s <= 0.0:
            return False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, d):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    return True


@nb.njit(cache=True, inline="always")
def _kappa(j_code, j_p, x, tmp):
    # local kernel level lim J(x, x+h)|h|^(d+alpha) used by the small-jump correction
    if j_code == J_DEFAULT:
        return j_p[0]
    d = x.shape[0]
    r = 1e-6
    for i in range(d):
        tmp[i] = x[i]
    tmp[0] += r
    return kernel_eval(j_code, j_p, x, tmp) * r ** (d + j_p[1])


@nb.njit(cache=True, inline="always")
def _eval_q(qcodes, qp, x, out):
    for k in range(qcodes.shape[0]):
        out[k] = potential_eval(qcodes[k], qp[k], x)


@nb.njit(cache=True, inline="always")
def _hist_add(hist, h_origin, h_sp, h_m, x, w):
    d = x.shape[0]
    n = 2 * h_m + 1
    idx = 0
    for i in range(d):
        k = int(math.floor((x[i] - h_origin[i]) / h_sp + 0.5)) + h_m
        if k < 0 or k >= n:
            return
        idx = idx * n + k
    hist[idx] += w


@nb.njit(cache=True, nogil=True)
def _run_paths(x0, n, path0, k0, k1, stream,
               diff_on, a_code, a_p,
               jump_on, j_code, j_p, env, alpha, lam, eps, trunc, correct, sj_coef,
               kind, rp, dt0, kmax, bridge, lam_bound, tmax,
               qcodes, qp, hist_on, h_origin, h_sp, h_m, hist, accept_floor,
               o_tau, o_pre, o_land, o_via, o_status, o_qint, o_qabs, o_steps, o_jumps):
    d = x0.shape[0]
    nq = qcodes.shape[0]
    st = np.empty(STATE_WORDS, dtype=np.uint64)
    fs = np.empty(2)
    A = np.empty((d, d))
    L = np.empty((d, d))
    G = np.empty((d, d, d))
    b = np.empty(d)
    x = np.empty(d)
    y = np.empty(d)
    z = np.empty(d)
    land = np.empty(d)
    nrm = np.empty(d)
    nrm_y = np.empty(d)
    tmp = np.empty(d)
    qx = np.empty(nq)
    qy = np.empty(nq)
    qint = np.empty(nq)
    qabs = np.empty(nq)
    ea = eps ** (-alpha)
    for p in range(n):
        stream_init(st, fs, k0, k1, np.uint64(path0 + p), stream)
        for i in range(d):
            x[i] = x0[i]
        for k in range(nq):
            qint[k] = 0.0
            qabs[k] = 0.0
        _eval_q(qcodes, qp, x, qx)
        t = 0.0
        tj = math.inf
        if jump_on and lam > 0.0:
            tj = next_exponential(st) / lam
        status = 0
        via = 0
        steps = 0
        nj = 0
        proposals = 0
        accepted = 0
        exited = False
        if not region_inside(kind, rp, x):
            for i in range(d):
                land[i] = x[i]
            exited = True
        while not exited:
            if t >= tmax:
                status = 1
                for i in range(d):
                    land[i] = x[i]
                break
            at_jump = False
            if diff_on:
                dist = region_distance(kind, rp, x, nrm)
                h = dt0
                k = 0
                while k < kmax and dist < 3.0 * math.sqrt(lam_bound * h):
                    h *= 0.5
                    k += 1
                if t + h >= tj:
                    h = tj - t
                    at_jump = True
                diffusion_eval(a_code, a_p, x, A)
                if jump_on and correct:
                    s = sj_coef * _kappa(j_code, j_p, x, tmp)
                    for i in range(d):
                        A[i, i] += s
                diffusion_grad(a_code, a_p, x, G)
                for j in range(d):
                    s = 0.0
                    for i in range(d):
                        s += G[i, i, j]
                    b[j] = 0.5 * s
                _chol(A, L)
                for i in range(d):
                    z[i] = next_normal(st, fs)
                sq = math.sqrt(h)
                for i in range(d):
                    s = 0.0
                    for j in range(i + 1):
                        s += L[i, j] * z[j]
                    y[i] = x[i] + b[i] * h + sq * s
                steps += 1
                if not region_inside(kind, rp, y):
                    region_crossing(kind, rp, x, y, land)
                    _eval_q(qcodes, qp, land, qy)
                    for k in range(nq):
                        qint[k] += 0.5 * h * (qx[k] + qy[k])
                        qabs[k] += 0.5 * h * (abs(qx[k]) + abs(qy[k]))
                    if hist_on:
                        _hist_add(hist, h_origin, h_sp, h_m, x, 0.5 * h)
                        _hist_add(hist, h_origin, h_sp, h_m, land, 0.5 * h)
                    t += h
                    exited = True
                    break
                if bridge:
                    dy = region_distance(kind, rp, y, nrm_y)
                    var = 0.0
                    for i in range(d):
                        for j in range(d):
                            var += nrm_y[i] * A[i, j] * nrm_y[j]
                    var *= h
                    pc = math.exp(-2.0 * dist * dy / var) if var > 0.0 else 0.0
                    if next_uniform(st) < pc:
                        for i in range(d):
                            land[i] = y[i] + dy * nrm_y[i]
                        _eval_q(qcodes, qp, land, qy)
                        for k in range(nq):
                            qint[k] += 0.5 * h * (qx[k] + qy[k])
                            qabs[k] += 0.5 * h * (abs(qx[k]) + abs(qy[k]))
                        if hist_on:
                            _hist_add(hist, h_origin, h_sp, h_m, x, 0.5 * h)
                            _hist_add(hist, h_origin, h_sp, h_m, land, 0.5 * h)
                        t += h
                        exited = True
                        break
                _eval_q(qcodes, qp, y, qy)
                for k in range(nq):
                    qint[k] += 0.5 * h * (qx[k] + qy[k])
                    qabs[k] += 0.5 * h * (abs(qx[k]) + abs(qy[k]))
                    qx[k] = qy[k]
                if hist_on:
                    _hist_add(hist, h_origin, h_sp, h_m, x, 0.5 * h)
                    _hist_add(hist, h_origin, h_sp, h_m, y, 0.5 * h)
                for i in range(d):
                    x[i] = y[i]
                t = tj if at_jump else t + h
            else:
                # pure jump motion: position is frozen until the next jump
                h = tj - t
                at_jump = True
                if t + h > tmax:
                    h = tmax - t
                    at_jump = False
                for k in range(nq):
                    qint[k] += h * qx[k]
                    qabs[k] += h * abs(qx[k])
                if hist_on:
                    _hist_add(hist, h_origin, h_sp, h_m, x, h)
                t = tj if at_jump else tmax
                steps += 1
            if at_jump:
                u = next_uniform(st)
                if trunc:
                    r = (ea - u * (ea - 1.0)) ** (-1.0 / alpha)
                else:
                    r = eps * u ** (-1.0 / alpha)
                s = 0.0
                for i in range(d):
                    z[i] = next_normal(st, fs)
                    s += z[i] * z[i]
                s = math.sqrt(s)
                for i in range(d):
                    y[i] = x[i] + r * z[i] / s
                proposals += 1
                acc = True
                if j_code != J_DEFAULT:
                    ratio = kernel_eval(j_code, j_p, x, y) * r ** (d + alpha) / env
                    acc = next_uniform(st) < ratio
                if acc:
                    accepted += 1
                    nj += 1
                    if not region_inside(kind, rp, y):
                        via = 1
                        for i in range(d):
                            land[i] = y[i]
                        exited = True
                        break
                    for i in range(d):
                        x[i] = y[i]
                    _eval_q(qcodes, qp, x, qx)
                elif proposals >= 1000 and accepted < accept_floor * proposals:
                    status = 2
                    for i in range(d):
                        land[i] = x[i]
                    break
                tj = t + next_exponential(st) / lam
        o_tau[p] = t
        for i in range(d):
            o_land[p, i] = land[i]
            o_pre[p, i] = x[i] if via == 1 else land[i]
        o_via[p] = via
        o_status[p] = status
        for k in range(nq):
            o_qint[p, k] = qint[k]
            o_qabs[p, k] = qabs[k]
        o_steps[p] = steps
        o_jumps[p] = nj


# ---------------------------------------------------------------- python API


def drift_from_divergence(model: OperatorModel, x) -> np.ndarray:
    """b_j(x) = 1/2 sum_i d_i a_ij(x)."""
    G = model.diffusion.gradient(x)
    return 0.5 * np.einsum("iij->j", G)


def jump_rate(model: OperatorModel, eps: float, truncated: bool = False) -> float:
    """Total rate of jumps of size >= eps (and < 1 when truncated) under the envelope."""
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    k = model.kernel
    C = k.c if k.is_default else k.require_envelope()
    s = sphere_area(model.d)
    a = k.alpha
    if truncated:
        return C * s * (eps ** (-a) - 1.0) / a
    return C * s * eps ** (-a) / a


def small_jump_variance(model: OperatorModel, eps: float) -> float:
    """Per-coordinate variance rate of the jumps below eps for the default kernel."""
    a = model.kernel.alpha
    return sphere_area(model.d) * eps ** (2.0 - a) / (model.d * (2.0 - a))


def sample_jump(model: OperatorModel, x, eps: float, truncated: bool = False,
                rng: np.random.Generator | None = None, size: int | None = None,
                accept_floor: float = 1e-3) -> np.ndarray:
    """Jump displacement(s) with law proportional to J(x, x+h) on |h| >= eps."""
    rng = np.random.default_rng() if rng is None else rng
    k = model.kernel
    d = model.d
    a = k.alpha
    n = 1 if size is None else int(size)
    x = np.asarray(x, dtype=float)

    def propose(m):
        u = rng.random(m)
        if truncated:
            ea = eps ** (-a)
            r = (ea - u * (ea - 1.0)) ** (-1.0 / a)
        else:
            r = eps * u ** (-1.0 / a)
        z = rng.standard_normal((m, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        return r[:, None] * z, r

    if k.is_default:
        out, _ = propose(n)
    else:
        env = k.require_envelope()
        got = []
        total = 0
        tried = 0
        while total < n:
            m = max(2 * (n - total), 16)
            hh, r = propose(m)
            ratio = k(np.broadcast_to(x, hh.shape), x + hh) * r ** (d + a) / env
            keep = rng.random(m) < ratio
            tried += m
            got.append(hh[keep])
            total += int(keep.sum())
            if tried >= 1000 and total < accept_floor * tried:
                raise RejectionStall(f"acceptance rate {total / tried:.3g} below floor {accept_floor:g}")
        out = np.concatenate(got)[:n]
    return out[0] if size is None else out


def _compiled_potentials(potentials: Sequence[Potential], d: int):
    nq = len(potentials)
    width = max([p.params.size for p in potentials] + [1])
    codes = np.zeros(nq, dtype=np.int64)
    params = np.zeros((nq, width))
    for i, q in enumerate(potentials):
        if not q.compiled:
            raise ConfigError(f"potential {q.name!r} is a Python callable; the path simulator needs a preset family")
        codes[i] = q.code
        params[i, :q.params.size] = q.params
    return codes, params


def _lam_bound(model: OperatorModel, region: Region, sj: float) -> float:
    rng = np.random.default_rng(12345)
    c = region.params[2:2 + model.d] if isinstance(region, BallDomain) else np.zeros(model.d)
    if isinstance(region, BallDomain):
        R = region.radius
        c = region.center
    else:
        R = 1.0
        c = np.zeros(model.d)
    pts = c + R * rng.uniform(-1, 1, size=(256, model.d))
    _, hi = ellipticity_bounds(model, pts)
    return hi + sj


@dataclass
class Occupation:
    """Cubic lattice centred at ``origin`` with 2m+1 cells of width ``spacing`` per axis."""

    origin: np.ndarray
    spacing: float
    m: int

    @property
    def n_per_axis(self) -> int:
        return 2 * self.m + 1

    def centers(self) -> np.ndarray:
        d = self.origin.shape[0]
        ax = np.arange(-self.m, self.m + 1) * self.spacing
        g = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
        return self.origin + g


def _kernel_args(model: OperatorModel, region: Region, cfg: PathConfig):
    d = model.d
    k = model.kernel
    if not model.diffusion.compiled:
        raise ConfigError("the path simulator needs a preset diffusion family")
    if model.jumps_enabled and not k.compiled:
        raise UnsupportedKernel(f"kernel {k.name!r} is a Python callable; the path simulator needs a compiled kernel family")
    jump_on = model.jumps_enabled
    lam = jump_rate(model, cfg.eps, cfg.truncated) if jump_on else 0.0
    env = (k.c if k.is_default else k.require_envelope())
    # without diffusion the process moves only by jumps; small jumps are dropped
    correct = bool(jump_on and model.diffusion_enabled and cfg.small_jumps == SMALL_CORRECT)
    sj = small_jump_variance(model, cfg.eps) if correct else 0.0
    lam_b = _lam_bound(model, region, sj * env) if model.diffusion_enabled else 1.0
    return dict(
        diff_on=model.diffusion_enabled, a_code=model.diffusion.code,
        a_p=np.asarray(model.diffusion.params, dtype=float),
        jump_on=jump_on, j_code=k.code, j_p=np.asarray(k.params, dtype=float), env=float(env),
        alpha=k.alpha, lam=lam, eps=cfg.eps, trunc=cfg.truncated, correct=correct, sj_coef=sj,
        kind=region.kind, rp=np.asarray(region.params, dtype=float), dt0=cfg.dt, kmax=cfg.halvings,
        bridge=cfg.bridge, lam_bound=lam_b, tmax=cfg.budget(region),
    )


def simulate_batch(x0, region: Region, model: OperatorModel, cfg: PathConfig, n_paths: int,
                   potentials: Sequence[Potential] | None = None, stream: int = 0,
                   path_offset: int = 0, workers: int = 1,
                   occupation: Occupation | None = None) -> ExitBatch:
    """Simulate ``n_paths`` independent paths from x0 until they leave ``region``.

    ``potentials`` defaults to the model potential; all listed potentials are
    integrated along the same paths.
    """
    x0 = np.ascontiguousarray(np.asarray(x0, dtype=float))
    d = model.d
    if x0.shape != (d,):
        raise ValueError(f"x0 must have shape ({d},)")
    if potentials is None:
        potentials = [model.potential]
    codes, qparams = _compiled_potentials(list(potentials), d)
    kw = _kernel_args(model, region, cfg)
    fac = StreamFactory(cfg.seed)
    n = int(n_paths)
    nq = codes.shape[0]
    tau = np.empty(n)
    pre = np.empty((n, d))
    land = np.empty((n, d))
    via = np.empty(n, dtype=np.int8)
    status = np.empty(n, dtype=np.int8)
    qint = np.empty((n, nq))
    qabs = np.empty((n, nq))
    steps = np.empty(n, dtype=np.int64)
    jumps = np.empty(n, dtype=np.int64)
    chunks = [(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]
    if occupation is not None:
        h_origin = np.asarray(occupation.origin, dtype=float)
        h_sp, h_m = float(occupation.spacing), int(occupation.m)
        ncell = occupation.n_per_axis ** d
        hists = [np.zeros(ncell) for _ in chunks]
    else:
        h_origin, h_sp, h_m = np.zeros(d), 1.0, 0
        hists = [np.zeros(1) for _ in chunks]

    def run(ci):
        s, e = chunks[ci]
        _run_paths(x0, e - s, path_offset + s, fac.k0, fac.k1, np.uint64(stream),
                   kw["diff_on"], kw["a_code"], kw["a_p"],
                   kw["jump_on"], kw["j_code"], kw["j_p"], kw["env"], kw["alpha"], kw["lam"],
                   kw["eps"], kw["trunc"], kw["correct"], kw["sj_coef"],
                   kw["kind"], kw["rp"], kw["dt0"], kw["kmax"], kw["bridge"], kw["lam_bound"],
                   kw["tmax"], codes, qparams, occupation is not None, h_origin, h_sp, h_m,
                   hists[ci], cfg.accept_floor,
                   tau[s:e], pre[s:e], land[s:e], via[s:e], status[s:e], qint[s:e], qabs[s:e],
                   steps[s:e], jumps[s:e])

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(run, range(len(chunks))))
    else:
        for ci in range(len(chunks)):
            run(ci)
    if np.any(status == STATUS_STALL):
        raise RejectionStall("jump thinning acceptance fell below the configured floor")
    occ = None
    if occupation is not None:
        occ = np.zeros_like(hists[0])
        for hh in hists:
            occ += hh
    meta = {"lambda": kw["lam"], "t_max": kw["tmax"], "seed": cfg.seed, "stream": stream,
            "small_jump_variance": kw["sj_coef"]}
    return ExitBatch(tau, pre, land, via.astype(bool), status, qint, qabs, steps, jumps,
                     np.arange(path_offset, path_offset + n), occ, meta)


def simulate_until_exit(x0, domain: Region, model: OperatorModel, cfg: PathConfig,
                        rng: StreamFactory | int | None = None, path: int = 0,
                        stream: int = 0) -> ExitRecord:
    """One path from x0; raises TimeBudgetExceeded (carrying the record) when censored."""
    seed = cfg.seed if rng is None else (rng.seed if isinstance(rng, StreamFactory) else int(rng))
    from dataclasses import replace
    b = simulate_batch(x0, domain, model, replace(cfg, seed=seed), 1, stream=stream, path_offset=path)
    rec = b.record(0)
    if rec.censored:
        err = TimeBudgetExceeded(f"path {path} did not exit by t_max={b.meta['t_max']:g}")
        err.record = rec
        raise err
    return rec
