"""Acceptance criteria 1-7, one pass/fail line per criterion on the terminal."""

import hashlib
import math
import time
import warnings

import numpy as np
import pytest

from jumplab import estimate as est
from jumplab import grid as gr
from jumplab.cli import main
from jumplab.errors import HeavyTailWarning, NotGaugeable
from jumplab.experiments import Context, verify_suite
from jumplab.fields import Potential
from jumplab.geometry import BallDomain
from jumplab.model import preset
from jumplab.partition import ExitPartition
from jumplab.scenario import load
from jumplab.sim import PathConfig, simulate_batch

from conftest import build_grid
from pathlib import Path

SCEN = Path(__file__).resolve().parents[1] / "scenarios"
pytestmark = pytest.mark.slow


def report(capsys, k, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {k}: {'PASS' if ok else 'FAIL'} {detail}")


def test_criterion_1_brownian_diagnostics(capsys):
    m = preset("brownian-diagnostic")
    B = BallDomain(np.zeros(3), 1.0)
    cfg = PathConfig.for_radius(1.0, seed=7)
    simulate_batch(np.zeros(3), B, m, cfg, 100)  # compile outside the timed region
    t0 = time.perf_counter()
    b = est.run_paths(np.zeros(3), B, m, cfg, 100_000)
    tau = est.expected_exit_time(np.zeros(3), B, m, cfg, batch=b)
    wall = time.perf_counter() - t0
    hm = est.harmonic_measure(np.zeros(3), B, m, cfg, ExitPartition(B), batch=b)
    _, p = hm.uniform_caps_chi2()
    gm = build_grid(m, R=1.0, cells=8)
    X = gm.mesh.centers
    i0 = int(gm.mesh.nearest(np.zeros(3))[0])
    r = np.linalg.norm(X, axis=1)
    away = r >= 4 * gm.mesh.h
    exact = (1 / r[away] - 1) / (2 * math.pi)
    green_err = float(np.max(np.abs(gm.G[i0, away] / exact - 1)))
    ok_tau = abs(tau.value - 1 / 3) <= 3 * tau.stderr
    ok = ok_tau and wall <= 60 and p > 0.01 and hm.far_mass == 0 and green_err < 0.05
    report(capsys, 1, ok, f"E tau = {tau.value:.5f} +- {tau.stderr:.5f} ({wall:.1f} s), "
                          f"caps chi2 p = {p:.3f}, Green row max rel err = {green_err:.3f}")
    assert ok_tau and wall <= 60
    assert p > 0.01 and hm.far_mass == 0
    assert green_err < 0.05


def test_criterion_2_structural_identities(capsys):
    t0 = time.perf_counter()
    gm = build_grid(preset("identity"), cells=8)
    wall = time.perf_counter() - t0
    part = gm.gen.partition
    sym = gm.symmetry_error()
    cons = float(np.max(np.abs(gr.exit_distribution(gm).sum(axis=1) - 1)))
    i0 = int(gm.mesh.nearest(np.zeros(3))[0])
    mk = gr.martin_kernel(gm, i0)
    levy, dens = 0.0, 0.0
    # generic points: cells nearest R/4 along three oblique directions
    for v in ([0.5, 1.0, -0.5], [-1.0, 0.3, 0.7], [0.2, -0.8, -0.6]):
        v = np.array(v)
        x = int(gm.mesh.nearest(0.125 * v / np.linalg.norm(v))[0])
        levy = max(levy, gr.levy_exit_identity_check(gm, x, np.arange(part.n_caps, part.n_cells)).gap)
        dens = max(dens, gr.harmonic_measure_density_check(gm, x, i0, mk=mk).rel_gap)
    ok = sym <= 1e-9 and cons <= 1e-9 and levy <= 1e-9 and dens <= 0.05 and wall <= 120
    report(capsys, 2, ok, f"{gm.gen.n} cells in {wall:.1f} s: symmetry {sym:.1e}, conservation "
                          f"{cons:.1e}, Levy gap {levy:.1e}, density max cap gap {dens:.3f}")
    assert 1800 <= gm.gen.n <= 2400
    assert sym <= 1e-9 and cons <= 1e-9 and levy <= 1e-9
    assert dens <= 0.05
    assert wall <= 120


def test_criterion_3_mc_grid_equivalence(capsys, default_grid):
    sc = load(SCEN / "default.toml")
    gm = default_grid
    m, dom, cfg, f = sc.model(), sc.domain(), sc.path_config(), sc.boundary_function()
    q_g, q_s = Potential.const(-0.5), sc.q()
    P = sc.probes()
    assert len(P) == 10
    idx = gm.mesh.nearest(P)
    grid_vals = {"dirichlet": gr.dirichlet_grid(gm, f), "gauge": gr.gauge_grid(gm, q_g),
                 "schrodinger": gr.schrodinger_grid(gm, q_s, f)}
    agree = {k: 0 for k in grid_vals}
    for i, p in enumerate(P):
        b = est.run_paths(p, dom, m, cfg, 100_000, potentials=[q_g, q_s], stream=3000 + i)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mc = {"dirichlet": est.solve_dirichlet(p, f, dom, m, cfg, batch=b),
                  "gauge": est.gauge(p, q_g, dom, m, cfg, batch=b, q_index=0),
                  "schrodinger": est.solve_schrodinger(p, f, q_s, dom, m, cfg, batch=b, q_index=1,
                                                       gaugeable=True)}
        for k, e in mc.items():
            g = float(grid_vals[k][idx[i]])
            agree[k] += abs(e.value - g) <= 3 * e.stderr + 0.10 * abs(g)
    frac = {k: v / len(P) for k, v in agree.items()}
    ok = all(v >= 0.9 for v in frac.values())
    report(capsys, 3, ok, "agreement fractions " + ", ".join(f"{k} {v:.1f}" for k, v in frac.items()))
    assert ok


def test_criterion_4_gauge_theory(capsys, default_grid):
    gm = default_grid
    m = preset("identity")
    dom = BallDomain(np.zeros(3), 0.5)
    cfg = PathConfig.for_radius(0.5, seed=11)
    z_mc = est.gauge(np.zeros(3), Potential.zero(), dom, m, cfg, n_paths=2000)
    z_grid = gr.gauge_grid(gm, Potential.zero())
    ok_zero = z_mc.value == 1.0 and bool(np.all(z_grid == 1.0))
    tau_max = float(np.max(gr.exit_time_grid(gm)))
    probes = np.array([[0.0, 0, 0], [0.125, 0, 0], [0, -0.25, 0]])
    lines, ok_sweep = [], True
    for eta in (0.25, 0.5, 0.75):
        q = Potential.const(eta / tau_max)
        H = gr.gauge_grid(gm, q)
        bound_g = 1 / (1 - eta)
        ok_g = float(H.max()) <= bound_g * (1 + 1e-12)
        batches = [est.run_paths(p, dom, m, cfg, 20_000, potentials=[q], stream=int(400 * eta) + i)
                   for i, p in enumerate(probes)]
        cert = est.khasminskii_certificate(q, dom, m, cfg, 20_000, probes, batches=batches)
        with warnings.catch_warnings():
            # eta = 0.75 is close to criticality; heavy e_q tails are expected there
            warnings.simplefilter("ignore", HeavyTailWarning)
            gs = [est.gauge(p, q, dom, m, cfg, batch=b) for p, b in zip(probes, batches)]
        ok_m = not isinstance(cert, est.NoCertificate) and all(
            g.value - 3 * g.stderr <= cert.bound for g in gs)
        ok_sweep &= ok_g and ok_m
        lines.append(f"eta {eta}: grid max H {H.max():.4f} <= {bound_g:.3f}, "
                     f"MC max {max(g.value for g in gs):.4f} <= {getattr(cert, 'bound', float('nan')):.3f}")
    _, top1 = gr.gauge_spectrum(gm, Potential.const(1.0))
    q_crit = 1.0 / top1
    refused = gr.gauge_grid(gm, Potential.const(2 * q_crit))
    below = gr.gauge_grid(gm, Potential.const(0.9 * q_crit))
    ok_refuse = isinstance(refused, NotGaugeable) and refused.top_eigenvalue >= 1 \
        and not isinstance(below, NotGaugeable)
    ok = ok_zero and ok_sweep and ok_refuse
    report(capsys, 4, ok, f"q=0 gauge exactly 1: {ok_zero}; " + "; ".join(lines)
           + f"; q_crit {q_crit:.2f}, refusal at 2 q_crit: {ok_refuse}")
    assert ok_zero and ok_sweep and ok_refuse


def test_criterion_5_inequality_stability(capsys):
    sc = load(SCEN / "default.toml")
    ctx = Context(sc)
    tables = {t.name: t for t in verify_suite(ctx)}
    stab = tables["stability"]
    names = [r[0] for r in stab.rows]
    for k in ("harnack_grid", "harnack_mc", "carleson", "bhp", "3g", "green_upper", "green_lower",
              "boundary_decay", "exit_linearity_slope"):
        assert k in names
    worst = max(stab.rows, key=lambda r: r[5])
    gap = tables["harnack-agreement"].summary["relative_gap"]
    ok = all(r[5] < 0.20 for r in stab.rows) and gap <= 0.05
    report(capsys, 5, ok, f"{len(stab.rows)} constants, worst change {worst[0]} {worst[5]:.3f}; "
                          f"Harnack MC vs grid gap {gap:.4f}")
    assert all(r[5] < 0.20 for r in stab.rows)
    assert gap <= 0.05


def test_criterion_6_conditional_gauge(capsys, default_grid):
    gm = default_grid
    rng = np.random.default_rng(6)
    poles = rng.choice(gm.gen.n, 20, replace=False)
    z = gr.conditional_gauge_grid(gm, Potential.zero(), poles)
    ok_zero = z.overall_min == 1.0 and z.overall_max == 1.0
    q = load(SCEN / "default.toml").q()
    eta = float(np.max(gm.mesh.volume * gm.G @ np.abs(q(gm.mesh.centers))))
    rep = gr.conditional_gauge_grid(gm, q, poles)
    ok_small = 0 < rep.overall_min and math.isfinite(rep.overall_max) \
        and rep.overall_max / rep.overall_min < 1 + 10 * eta
    ok = ok_zero and ok_small
    report(capsys, 6, ok, f"q=0: F in [{z.overall_min}, {z.overall_max}]; eta {eta:.3f}: "
                          f"F in [{rep.overall_min:.4f}, {rep.overall_max:.4f}] over 20 poles")
    assert ok_zero and ok_small


def _csv_digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*.csv")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_criterion_7_determinism(capsys, tmp_path):
    f = tmp_path / "det.toml"
    f.write_text('name = "det"\npotential = "const:-0.5"\nn_paths = 300\nn_paths_fine = 1200\n'
                 'mesh_cells = 5\nmesh_pair = [5, 10]\nseed = 17\n')
    digests = []
    for k, w in enumerate((1, 1, 4, 8)):
        main(["verify", str(f), "--out", str(tmp_path / f"r{k}"), "--workers", str(w)])
        digests.append(_csv_digest(tmp_path / f"r{k}"))
    n_csv = len(list((tmp_path / "r0").rglob("*.csv")))
    ok = n_csv >= 4 and len(set(digests)) == 1
    report(capsys, 7, ok, f"{n_csv} CSV files, digests at workers 1, 1, 4, 8: "
                          + ", ".join(d[:12] for d in digests))
    assert n_csv >= 4 and len(set(digests)) == 1
