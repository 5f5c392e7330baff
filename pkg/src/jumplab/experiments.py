"""Named experiments and the two-budget verification suite.

Every experiment returns ``Table`` objects: fixed columns, rows of plain
Python values, plus a summary dict (empirical constants, tolerances,
verdicts).  Monte-Carlo work is indexed by (seed, stream, path) only, so the
tables do not depend on the worker count.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import estimate as est
from . import grid as gr
from .errors import JumplabError, NoCertificate, NotGaugeable
from .fields import Potential
from .geometry import BallDomain, BallIntersection, BoundaryChart
from .model import kato_norm
from .sim import ExitBatch

# tolerances of the verification suite
TOL_SYMMETRY = 1e-9
TOL_CONSERVATION = 1e-9
TOL_LEVY = 1e-9
TOL_DENSITY = 0.05
TOL_STABILITY = 0.20
TOL_HARNACK_MC_GRID = 0.05

# stream blocks; each MC job gets its own range
_STREAMS = {
    "exit-time": 1000, "harmonic-measure": 2000, "probe": 3000, "half-ball": 4000, "harnack": 5000, "verify-harnack": 6000,
    "verify-carleson": 7000, "verify-linearity": 8000,
}


@dataclass
class Table:
    name: str
    columns: list
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, *values):
        if len(values) != len(self.columns):
            raise ValueError(f"{self.name}: row has {len(values)} values for {len(self.columns)} columns")
        self.rows.append([_plain(v) for v in values])


def _plain(v):
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def rel_change(a: float, b: float) -> float:
    den = max(abs(a), abs(b), 1e-300)
    return abs(a - b) / den


class Context:
    """Caches grids and Monte-Carlo batches for one scenario."""

    def __init__(self, sc, workers: int = 1):
        self.sc = sc
        self.workers = workers
        self.model = sc.model()
        self.domain: BallDomain = sc.domain()
        self.q = sc.q()
        self.f = sc.boundary_function()
        self.cfg = sc.path_config()
        self._grids = {}
        self._batches = {}

    # grids -----------------------------------------------------------

    def grid(self, cells: int | None = None):
        cells = cells or self.sc.mesh_cells
        if cells not in self._grids:
            # keep at most one grid besides the default to bound memory
            for k in list(self._grids):
                if k != self.sc.mesh_cells:
                    del self._grids[k]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                gen = gr.assemble_generator(self.model, self.domain, h=self.sc.radius / cells,
                                            partition=self.sc.partition(), truncated=self.sc.truncated)
            self._grids[cells] = gr.green_matrix(gen)
        return self._grids[cells]

    def drop_grid(self, cells: int):
        self._grids.pop(cells, None)

    # Monte Carlo -------------------------------------------------------

    def batch(self, key, x, region=None, cfg=None, n_paths=None, potentials=None, stream=0) -> ExitBatch:
        x = np.asarray(x, dtype=float)
        k = (key, stream, x.tobytes(), n_paths or self.sc.n_paths)
        if k not in self._batches:
            self._batches[k] = est.run_paths(
                np.asarray(x, dtype=float), region or self.domain, self.model, cfg or self.cfg,
                n_paths or self.sc.n_paths, potentials=potentials, workers=self.workers, stream=stream)
        return self._batches[k]

    def probe_batches(self, name: str, probes, n_paths=None):
        base = _STREAMS[name]
        pots = [self.q]
        return [self.batch(name, p, n_paths=n_paths, potentials=pots, stream=base + i)
                for i, p in enumerate(probes)]

    def gaugeable(self, cells: int | None = None):
        """(gaugeable, radius, top) from the grid spectrum of K."""
        if self.q.is_zero:
            return True, 0.0, 0.0
        radius, top = gr.gauge_spectrum(self.grid(cells), self.q)
        return top < 1.0, radius, top


def _cells_for(gm, points):
    idx = gm.mesh.nearest(points)
    dist = np.linalg.norm(gm.mesh.centers[idx] - points, axis=1)
    return idx, dist


# ------------------------------------------------------------ run experiments


def exp_exit_time(ctx: Context) -> list:
    P = ctx.sc.probes()
    t = Table("exit-time", ["probe", *[f"x{i + 1}" for i in range(ctx.sc.d)], "value", "stderr",
                            "n", "censored", "ratio_R2"])
    vals = []
    for i, p in enumerate(P):
        b = ctx.batch("exit-time", p, stream=_STREAMS["exit-time"] + i)
        e = est.expected_exit_time(p, ctx.domain, ctx.model, ctx.cfg, batch=b)
        vals.append(e)
        t.add(i, *p.tolist(), e.value, e.stderr, e.n, e.censored_count, e.extra["ratio_R2"])
    c = int(np.argmin(np.linalg.norm(P - ctx.domain.center, axis=1)))
    t.summary = {"value_at_center": vals[c].value, "stderr_at_center": vals[c].stderr,
                 "max_ratio_R2": max(v.extra["ratio_R2"] for v in vals),
                 "min_ratio_R2": min(v.extra["ratio_R2"] for v in vals)}
    return [t]


def exp_harmonic_measure(ctx: Context) -> list:
    x = ctx.domain.center
    b = ctx.batch("harmonic-measure", x, stream=_STREAMS["harmonic-measure"])
    hm = est.harmonic_measure(x, ctx.domain, ctx.model, ctx.cfg, batch=b,
                              partition=ctx.sc.partition())
    t = Table("harmonic-measure", ["cell", "label", "mass", "stderr"])
    labels = hm.partition.labels()
    for i, (m, s) in enumerate(zip(hm.masses, hm.stderr)):
        t.add(i, labels[i], m, s)
    chi2, p = hm.uniform_caps_chi2()
    t.summary = {"p_continuous": hm.p_continuous, "p_jump": hm.p_jump, "far_mass": hm.far_mass,
                 "caps_chi2": chi2, "caps_chi2_p": p}
    return [t]


def _solve_table(ctx: Context, kind: str) -> list:
    P = ctx.sc.probes()
    gm = ctx.grid()
    idx, dist = _cells_for(gm, P)
    t = Table(kind, ["probe", *[f"x{i + 1}" for i in range(ctx.sc.d)], "mc", "stderr", "grid",
                     "cell_offset", "agree"])
    refused = None
    if kind == "dirichlet":
        g = gr.dirichlet_grid(gm, ctx.f)
    elif kind == "gauge":
        g = gr.gauge_grid(gm, ctx.q)
    else:
        g = gr.schrodinger_grid(gm, ctx.q, ctx.f)
    if isinstance(g, NotGaugeable):
        refused = g
    if refused is not None:
        for i, p in enumerate(P):
            t.add(i, *p.tolist(), "NotGaugeable", "", "NotGaugeable", float(dist[i]), "")
        t.summary = {"refused": True, "spectral_radius": refused.radius,
                     "top_eigenvalue": refused.top_eigenvalue}
        return [t]
    batches = ctx.probe_batches("probe", P)
    n_agree = 0
    for i, p in enumerate(P):
        b = batches[i]
        if kind == "dirichlet":
            e = est.solve_dirichlet(p, ctx.f, ctx.domain, ctx.model, ctx.cfg, batch=b)
        elif kind == "gauge":
            e = est.gauge(p, ctx.q, ctx.domain, ctx.model, ctx.cfg, batch=b)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                e = est.solve_schrodinger(p, ctx.f, ctx.q, ctx.domain, ctx.model, ctx.cfg,
                                          batch=b, gaugeable=True)
        gv = float(g[idx[i]])
        ok = abs(e.value - gv) <= 3.0 * e.stderr + 0.10 * abs(gv)
        n_agree += ok
        t.add(i, *p.tolist(), e.value, e.stderr, gv, float(dist[i]), ok)
    t.summary = {"refused": False, "agree_fraction": n_agree / len(P), "tolerance": "3 stderr + 10%"}
    return [t]


def exp_green_row(ctx: Context) -> list:
    gm = ctx.grid()
    i0 = int(gm.mesh.nearest(ctx.domain.center)[0])
    X = gm.mesh.centers
    t = Table("green-row", ["cell", *[f"y{i + 1}" for i in range(ctx.sc.d)], "delta", "G"])
    dl = gm.mesh.delta
    for j in range(gm.gen.n):
        t.add(j, *X[j].tolist(), float(dl[j]), float(gm.G[i0, j]))
    t.summary = {"n_cells": gm.gen.n, "h": gm.h, "symmetry_error": gm.symmetry_error()}
    return [t]


def exp_kato(ctx: Context) -> list:
    t = Table("kato", ["r", "norm"])
    for fr in (0.125, 0.25, 0.5, 1.0):
        r = fr * ctx.sc.radius
        v = kato_norm(ctx.q, r, domain=ctx.domain)
        t.add(r, v)
    t.summary = {"norm_at_R": t.rows[-1][1]}
    return [t]


def _grid_eta(gm, q: Potential) -> float:
    qa = np.abs(np.asarray(q(gm.mesh.centers), dtype=float))
    return float(np.max(gm.mesh.volume * gm.G @ qa))


def exp_certificate(ctx: Context) -> list:
    P = ctx.sc.probes()
    batches = ctx.probe_batches("probe", P)
    cert = est.khasminskii_certificate(ctx.q, ctx.domain, ctx.model, ctx.cfg, ctx.sc.n_paths, P,
                                       batches=batches)
    gm = ctx.grid()
    eta_g = _grid_eta(gm, ctx.q)
    t = Table("certificate", ["source", "eta", "bound", "certified"])
    if isinstance(cert, NoCertificate):
        t.add("mc", cert.eta, "", False)
    else:
        t.add("mc", cert.eta, cert.bound, True)
    t.add("grid", eta_g, 1.0 / (1.0 - eta_g) if eta_g < 1 else "", eta_g < 1)
    t.summary = {"eta_mc": cert.eta, "eta_grid": eta_g}
    return [t]


def _half_ball_probes(ctx: Context) -> np.ndarray:
    d, R = ctx.sc.d, ctx.sc.radius
    pts = [np.zeros(d)]
    for k in range(d):
        for s in (-1.0, 1.0):
            e = np.zeros(d)
            e[k] = s * R / 2
            pts.append(e)
    return ctx.domain.center + np.array(pts)


def _harnack_mc(ctx: Context, probes, n_paths, n_head=None, name="harnack"):
    gaugeable = ctx.gaugeable()[0]
    if not gaugeable:
        raise NotGaugeableError(ctx.gaugeable())
    batches = ctx.probe_batches(name, probes, n_paths=n_paths)
    if n_head is not None:
        batches = [b.head(n_head) for b in batches]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ests = [est.solve_schrodinger(p, ctx.f, ctx.q, ctx.domain, ctx.model, ctx.cfg, batch=b,
                                      gaugeable=True) for p, b in zip(probes, batches)]
    return est.harnack_report(ests, ctx.domain, probes)


class NotGaugeableError(JumplabError):
    def __init__(self, info):
        super().__init__(f"potential is not gaugeable on the grid (spectral radius {info[1]:.4g}, "
                         f"top eigenvalue {info[2]:.4g})")
        self.info = info


def exp_harnack(ctx: Context) -> list:
    P = _half_ball_probes(ctx)
    gm = ctx.grid()
    rep = _harnack_mc(ctx, P, ctx.sc.n_paths)
    idx, _ = _cells_for(gm, P)
    hg = gr.harnack_grid(gm, ctx.q, ctx.f, cells=idx)
    t = Table("harnack", ["probe", *[f"x{i + 1}" for i in range(ctx.sc.d)], "mc", "stderr", "grid"])
    for i, p in enumerate(P):
        t.add(i, *p.tolist(), rep.values[i].value, rep.values[i].stderr, float(hg.u[idx[i]]))
    t.summary = {"ratio_mc": rep.ratio, "ratio_mc_stderr": rep.stderr, "ratio_grid": hg.ratio,
                 "relative_gap": rel_change(rep.ratio, hg.ratio)}
    return [t]


def exp_structural(ctx: Context) -> list:
    return [structural_table(ctx)]


def structural_table(ctx: Context) -> Table:
    gm = ctx.grid()
    gen = gm.gen
    i0 = int(gm.mesh.nearest(ctx.domain.center)[0])
    x = _generic_cell(gm)
    om = gr.exit_distribution(gm)
    cons = float(np.max(np.abs(om.sum(axis=1) - 1.0)))
    sym = gm.symmetry_error()
    t = Table("structural", ["check", "value", "tolerance", "verdict"])
    t.add("green_symmetry", sym, TOL_SYMMETRY, _verdict(sym <= TOL_SYMMETRY))
    t.add("conservation", cons, TOL_CONSERVATION, _verdict(cons <= TOL_CONSERVATION))
    if ctx.model.jumps_enabled:
        part = gen.partition
        lev = gr.levy_exit_identity_check(gm, x, np.arange(part.n_caps, part.n_cells))
        t.add("levy_exit_identity", lev.gap, TOL_LEVY, _verdict(lev.gap <= TOL_LEVY))
    if ctx.model.diffusion_enabled:
        mk = gr.martin_kernel(gm, i0)
        dc = gr.harmonic_measure_density_check(gm, x, i0, mk=mk)
        da = gr.harmonic_measure_density_check(gm, x, i0, mode="adjacent", mk=mk)
        t.add("density_adjacent", da.gap, TOL_LEVY, _verdict(da.gap <= TOL_LEVY))
        t.add("density_extrapolated", dc.rel_gap, TOL_DENSITY, _verdict(dc.rel_gap <= TOL_DENSITY))
    t.summary = {r[0]: {"value": r[1], "tolerance": r[2], "verdict": r[3]} for r in t.rows}
    t.summary["n_cells"] = gen.n
    return t


def _generic_cell(gm) -> int:
    """A fixed off-center cell at about a quarter radius."""
    d = gm.mesh.d
    v = np.array([0.5, 1.0, -0.5] + [0.25] * (d - 3))
    v = v / np.linalg.norm(v) * gm.mesh.domain.radius / 4
    return int(gm.mesh.nearest(gm.mesh.domain.center + v)[0])


def _verdict(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


RUNNERS: dict[str, Callable] = {
    "exit-time": exp_exit_time,
    "harmonic-measure": exp_harmonic_measure,
    "dirichlet": lambda ctx: _solve_table(ctx, "dirichlet"),
    "gauge": lambda ctx: _solve_table(ctx, "gauge"),
    "schrodinger": lambda ctx: _solve_table(ctx, "schrodinger"),
    "green-row": exp_green_row,
    "kato": exp_kato,
    "certificate": exp_certificate,
    "harnack": exp_harnack,
    "structural": exp_structural,
}


# ----------------------------------------------------------- verification


def _stability_row(t: Table, name: str, a: float, b: float, label_a: str, label_b: str):
    rc = rel_change(a, b)
    ok = math.isfinite(rc) and rc < TOL_STABILITY
    t.add(name, label_a, label_b, a, b, rc, TOL_STABILITY, _verdict(ok))


def grid_constants(ctx: Context, cells: int, points: np.ndarray, triples: np.ndarray,
                   min_sep: float, chart: BoundaryChart) -> dict:
    gm = ctx.grid(cells)
    idx = gm.mesh.cells_at(points)
    dom = ctx.domain
    half = np.flatnonzero(np.linalg.norm(points - dom.center, axis=1) <= dom.radius / 2 * (1 + 1e-12))
    out = {}
    hg = gr.harnack_grid(gm, ctx.q, ctx.f, cells=idx[half])
    out["harnack_grid"] = hg if isinstance(hg, NotGaugeable) else hg.ratio
    out["3g"] = gr.check_3g(gm, idx[triples]).value
    gb = gr.green_bounds_report(gm, cells=idx, min_sep=min_sep)
    out["green_upper"] = gb.c_up
    out["green_lower"] = gb.c_low
    # pole: the shared point nearest to x0 - (Q - x0)/3
    k = int(np.argmin(np.linalg.norm(points - (dom.center - (chart.Q - dom.center) / 3.0), axis=1)))
    out["boundary_decay"] = gr.boundary_decay_report(gm, int(idx[k]), chart, dom.radius / 3.0,
                                                     cells=idx).value
    return out


def _triples(points: np.ndarray, min_sep: float, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    T = rng.integers(0, points.shape[0], (8 * n, 3))
    P = points
    s = np.minimum.reduce([np.linalg.norm(P[T[:, 0]] - P[T[:, 1]], axis=1),
                           np.linalg.norm(P[T[:, 1]] - P[T[:, 2]], axis=1),
                           np.linalg.norm(P[T[:, 0]] - P[T[:, 2]], axis=1)])
    return T[s >= min_sep][:n]


def local_setup(ctx: Context):
    """Chart at x0 + R e1, local radius r = 0.45 R1 and the local probe set."""
    dom = ctx.domain
    d = ctx.sc.d
    e1 = np.zeros(d)
    e1[0] = 1.0
    chart = BoundaryChart.at(dom, e1)
    r = 0.45 * chart.R1
    n = chart.inward_normal
    t = np.zeros(d)
    t[1] = 1.0
    pts = [chart.normal_point(r * f) for f in (0.1, 0.25, 0.4)]
    pts.append(chart.normal_point(0.25 * r) + 0.2 * r * t)
    return chart, r, np.array(pts), t


def carleson_bhp(ctx: Context, n_paths: int, n_head: int | None = None) -> dict:
    chart, r, P, t = local_setup(ctx)
    dom = ctx.domain
    U = BallIntersection((dom, BallDomain(chart.Q, r)))
    cfg = ctx.sc.path_config(radius=r)
    xr = est.carleson_reference(chart, r)
    pts = np.vstack([P, xr[None, :]])
    base = _STREAMS["verify-carleson"]
    u_f = lambda y: (dom.delta(y) > 0).astype(float)
    v_f = lambda y: ((dom.delta(y) > 0) & ((y - chart.Q) @ t > 0)).astype(float)
    us, vs = [], []
    for i, p in enumerate(pts):
        b = ctx.batch("local", p, region=U, cfg=cfg, n_paths=n_paths, stream=base + i)
        if n_head is not None:
            b = b.head(n_head)
        us.append(est.solve_dirichlet(p, u_f, U, ctx.model, cfg, batch=b))
        vs.append(est.solve_dirichlet(p, v_f, U, ctx.model, cfg, batch=b))
    car = est.carleson_report(chart, r, us[:-1], P, ref=us[-1])
    pairs = [(P[i], P[j]) for i in range(len(P)) for j in range(len(P)) if i != j]
    bhp = est.bhp_report(chart, r, lambda p: us[_match(P, p)], pairs)
    dr = est.double_ratio_report(us[:-1], vs[:-1])
    return {"carleson": car.ratio, "bhp": bhp.ratio, "bhp_double_ratio": dr.ratio}


def _match(P, p) -> int:
    return int(np.argmin(np.linalg.norm(P - p, axis=1)))


def exit_linearity(ctx: Context, n_paths: int, n_head: int | None = None):
    chart, _, _, _ = local_setup(ctx)
    cfg = ctx.sc.path_config(radius=chart.r0)
    depths = chart.delta0 * np.array([0.2, 0.4, 0.6, 0.8])
    box = chart.box(chart.delta0, chart.r0)
    base = _STREAMS["verify-linearity"]
    batches = []
    for k, dep in enumerate(depths):
        b = ctx.batch("linearity", chart.normal_point(dep), region=box, cfg=cfg, n_paths=n_paths,
                      potentials=[Potential.zero()], stream=base + k)
        batches.append(b.head(n_head) if n_head is not None else b)
    return est.boundary_exit_linearity(chart, ctx.model, cfg, depths, batches=batches)


def verify_suite(ctx: Context) -> list:
    """Structural identities, gauge bounds and two-budget stability of all constants."""
    sc = ctx.sc
    tables = [structural_table(ctx)]
    stab = Table("stability", ["constant", "budget_a", "budget_b", "value_a", "value_b",
                               "rel_change", "tolerance", "verdict"])
    refusals = []
    gauge_ok, radius, top = ctx.gaugeable()

    # grid constants at h and h/2 on points shared by both meshes
    coarse_cells, fine_cells = sc.mesh_pair
    coarse = gr.Mesh.build(ctx.domain, sc.radius / coarse_cells)
    pts = coarse.centers
    min_sep = 2.0 * coarse.h * (1 - 1e-9)
    T = _triples(pts, min_sep, 3000, sc.seed)
    chart, _, _, _ = local_setup(ctx)
    consts = []
    for cells in (coarse_cells, fine_cells):
        consts.append(grid_constants(ctx, cells, pts, T, min_sep, chart))
        if cells != sc.mesh_cells:
            ctx.drop_grid(cells)
    la, lb = f"h=R/{coarse_cells}", f"h=R/{fine_cells}"
    for key in ("harnack_grid", "3g", "green_upper", "green_lower", "boundary_decay"):
        a, b = consts[0][key], consts[1][key]
        if isinstance(a, NotGaugeable) or isinstance(b, NotGaugeable):
            stab.add(key, la, lb, "NotGaugeable", "NotGaugeable", "", TOL_STABILITY, "REFUSED")
            refusals.append(key)
            continue
        _stability_row(stab, key, a, b, la, lb)

    # Monte-Carlo constants at N and 4N paths (the N-path run is the prefix)
    n_a, n_b = sc.n_paths, sc.n_paths_fine
    ma, mb = f"N={n_a}", f"N={n_b}"
    P = _half_ball_probes(ctx)
    hm = {}
    if gauge_ok:
        ra = _harnack_mc(ctx, P, n_b, n_head=n_a, name="verify-harnack")
        rb = _harnack_mc(ctx, P, n_b, name="verify-harnack")
        _stability_row(stab, "harnack_mc", ra.ratio, rb.ratio, ma, mb)
        hm = {"mc": rb.ratio}
    else:
        stab.add("harnack_mc", ma, mb, "NotGaugeable", "NotGaugeable", "", TOL_STABILITY, "REFUSED")
        refusals.append("harnack_mc")
    ca = carleson_bhp(ctx, n_b, n_head=n_a)
    cb = carleson_bhp(ctx, n_b)
    for key in ("carleson", "bhp", "bhp_double_ratio"):
        _stability_row(stab, key, ca[key], cb[key], ma, mb)
    la_ = exit_linearity(ctx, n_b, n_head=n_a)
    lb_ = exit_linearity(ctx, n_b)
    _stability_row(stab, "exit_linearity_slope", la_.slope_box, lb_.slope_box, ma, mb)
    _stability_row(stab, "exit_linearity_slope_in_B", la_.slope_in_B, lb_.slope_in_B, ma, mb)
    tables.append(stab)

    # Harnack MC vs grid on the default mesh
    agree = Table("harnack-agreement", ["source", "ratio", "tolerance", "verdict"])
    if gauge_ok:
        gm = ctx.grid()
        idx, _ = _cells_for(gm, P)
        hg = gr.harnack_grid(gm, ctx.q, ctx.f, cells=idx)
        gap = rel_change(hm["mc"], hg.ratio)
        agree.add("mc", hm["mc"], "", "")
        agree.add("grid", hg.ratio, TOL_HARNACK_MC_GRID, _verdict(gap <= TOL_HARNACK_MC_GRID))
        agree.summary = {"relative_gap": gap}
    else:
        agree.add("grid", "NotGaugeable", TOL_HARNACK_MC_GRID, "REFUSED")
    tables.append(agree)

    tables.append(gauge_bounds_table(ctx, P))
    stab.summary = {r[0]: {"value_a": r[3], "value_b": r[4], "rel_change": r[5], "verdict": r[7]}
                    for r in stab.rows}
    return tables


def gauge_bounds_table(ctx: Context, probes) -> Table:
    """Khasminskii bound 1/(1 - eta) against grid and MC gauges."""
    t = Table("gauge-bounds", ["source", "eta", "bound", "max_gauge", "verdict"])
    gm = ctx.grid()
    if ctx.q.is_zero:
        H = gr.gauge_grid(gm, ctx.q)
        t.add("grid", 0.0, 1.0, float(np.max(H)), _verdict(bool(np.all(H == 1.0))))
        return t
    H = gr.gauge_grid(gm, ctx.q)
    if isinstance(H, NotGaugeable):
        t.add("grid", "", "", "NotGaugeable", "REFUSED")
        t.summary = {"refused": True, "spectral_radius": H.radius, "top_eigenvalue": H.top_eigenvalue}
        return t
    eta = _grid_eta(gm, ctx.q)
    if eta < 1:
        bound = 1.0 / (1.0 - eta)
        t.add("grid", eta, bound, float(np.max(H)), _verdict(float(np.max(H)) <= bound * (1 + 1e-12)))
    else:
        t.add("grid", eta, "", float(np.max(H)), "NO_CERTIFICATE")
    batches = ctx.probe_batches("half-ball", probes)
    cert = est.khasminskii_certificate(ctx.q, ctx.domain, ctx.model, ctx.cfg, ctx.sc.n_paths, probes,
                                       batches=batches)
    gs = [est.gauge(p, ctx.q, ctx.domain, ctx.model, ctx.cfg, batch=b) for p, b in zip(probes, batches)]
    gmax = max(g.value for g in gs)
    if isinstance(cert, NoCertificate):
        t.add("mc", cert.eta, "", gmax, "NO_CERTIFICATE")
    else:
        ok = all(g.value - 3 * g.stderr <= cert.bound for g in gs)
        t.add("mc", cert.eta, cert.bound, gmax, _verdict(ok))
    return t
