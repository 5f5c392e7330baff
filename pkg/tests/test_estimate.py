import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumplab import estimate as est
from jumplab.errors import (ExcessiveCensoring, HeavyTailWarning, NoCertificate, NonPositiveValue,
                            ReferenceDegenerate, UnboundedBoundaryData)
from jumplab.fields import Potential
from jumplab.geometry import BallDomain, BoundaryChart
from jumplab.model import preset
from jumplab.partition import ExitPartition
from jumplab.sim import PathConfig, simulate_batch

B = BallDomain(np.zeros(3), 0.5)
CFG = PathConfig.for_radius(0.5, seed=3)
M = preset("identity")
HALF = lambda y: (np.atleast_2d(y) @ np.array([1.0, 0.37, 0.21]) > 0).astype(float)

floats = st.floats(-1e6, 1e6, allow_nan=False)


@given(st.lists(floats, min_size=1, max_size=60), st.integers(0, 60))
@settings(max_examples=80, deadline=None)
def test_running_stats_merge_order(values, cut):
    v = np.array(values)
    cut = min(cut, v.size)
    a = est.RunningStats.of(v[:cut]).merge(est.RunningStats.of(v[cut:]))
    b = est.RunningStats.of(v[cut:]).merge(est.RunningStats.of(v[:cut]))
    whole = est.RunningStats.of(v)
    assert a.mean == b.mean == whole.mean == math.fsum(values) / len(values)
    assert a.n == whole.n
    assert a.m2 == pytest.approx(whole.m2, rel=1e-9, abs=1e-6)


def test_estimate_within():
    e = est.Estimate(1.0, 0.1, 100)
    assert e.within(1.25) and not e.within(1.35)
    s = e.scaled(-2.0)
    assert s.value == -2.0 and s.stderr == 0.2


@pytest.fixture(scope="module")
def batch():
    return simulate_batch(np.array([0.1, 0.0, -0.05]), B, M, CFG, 20_000,
                          potentials=[Potential.const(-0.5)])


def test_dirichlet_constant_data(batch):
    e = est.solve_dirichlet(None, lambda y: np.ones(len(y)), B, M, CFG, batch=batch)
    assert e.value == 1.0 and e.stderr == 0.0


def test_dirichlet_bound(batch):
    with pytest.raises(UnboundedBoundaryData):
        est.solve_dirichlet(None, lambda y: 1e9 * np.ones(len(y)), B, M, CFG, batch=batch)


def test_zero_gauge_is_one():
    e = est.gauge(np.zeros(3), Potential.zero(), B, M, CFG, n_paths=1000)
    assert e.value == 1.0 and e.stderr == 0.0


def test_schrodinger_reductions(batch):
    zero = simulate_batch(np.array([0.1, 0.0, -0.05]), B, M, CFG, 3000, potentials=[Potential.zero()])
    d = est.solve_dirichlet(None, HALF, B, M, CFG, batch=zero)
    s = est.solve_schrodinger(None, HALF, Potential.zero(), B, M, CFG, batch=zero)
    assert (s.value, s.stderr) == (d.value, d.stderr)
    q = Potential.const(-0.5)
    g = est.gauge(None, q, B, M, CFG, batch=batch)
    s1 = est.solve_schrodinger(None, lambda y: np.ones(len(y)), q, B, M, CFG, batch=batch, gaugeable=True)
    assert (s1.value, s1.stderr) == (g.value, g.stderr)
    assert 0 < g.value < 1
    with pytest.warns(UserWarning):
        flagged = est.solve_schrodinger(None, HALF, q, B, M, CFG, batch=batch)
    assert flagged.flagged


def test_heavy_tail_warning(batch):
    with pytest.warns(HeavyTailWarning):
        est.gauge(None, Potential.const(-0.5), B, M, CFG, batch=batch, kurtosis_ceiling=1.0)


def test_near_boundary_start():
    x = np.array([1 - 1e-9, 0, 0])
    U = BallDomain(np.zeros(3), 1.0)
    m = preset("brownian-diagnostic")
    # the first step shrinks to dt 2^-halvings next to the boundary
    e = est.expected_exit_time(x, U, m, PathConfig.for_radius(1.0), n_paths=200)
    assert e.value <= PathConfig.for_radius(1.0).dt * 2.0 ** -8
    e = est.expected_exit_time(x, U, m, PathConfig.for_radius(1.0, halvings=20), n_paths=200)
    assert e.value < 1e-6


def test_exit_time_extra_ratio():
    e = est.expected_exit_time(np.zeros(3), B, M, CFG, n_paths=2000)
    assert e.extra["ratio_R2"] == pytest.approx(e.value / 0.25)


def test_censoring_ceiling():
    from dataclasses import replace
    with pytest.raises(ExcessiveCensoring):
        est.run_paths(np.zeros(3), B, M, replace(CFG, t_max=1e-4), 200)


def test_harmonic_measure_masses():
    part = ExitPartition(B)
    hm = est.harmonic_measure(np.zeros(3), B, M, CFG, part, n_paths=12_000)
    assert hm.masses.sum() + hm.censored_fraction == pytest.approx(1.0, abs=1e-15)
    assert hm.p_jump + hm.p_continuous == pytest.approx(1.0)
    # rotation symmetry: equal-solid-angle caps carry equal mass
    caps, se = hm.cap_masses, hm.stderr[:12]
    for i in range(12):
        for j in range(i + 1, 12):
            assert abs(caps[i] - caps[j]) <= 4 * math.hypot(se[i], se[j]) + 1e-12


def test_certificate_zero_and_linearity():
    P = np.array([[0.0, 0, 0], [0.2, 0, 0]])
    c0 = est.khasminskii_certificate(Potential.zero(), B, M, CFG, 500, P)
    assert c0.eta == 0.0 and c0.bound == 1.0
    v = 2.0
    q = Potential.const(v)
    batches = [simulate_batch(p, B, M, CFG, 4000, potentials=[q], stream=10 + i) for i, p in enumerate(P)]
    cert = est.khasminskii_certificate(q, B, M, CFG, 4000, P, upper=False, batches=batches)
    taus = [est.expected_exit_time(p, B, M, CFG, batch=b).value for p, b in zip(P, batches)]
    assert cert.eta == pytest.approx(v * max(taus), rel=1e-12)
    assert isinstance(est.khasminskii_certificate(Potential.const(500.0), B, M, CFG, 1000, P),
                      NoCertificate)


def test_certificate_bound_respected():
    P = np.array([[0.0, 0, 0]])
    tau = est.expected_exit_time(P[0], B, M, CFG, n_paths=4000).value
    q = Potential.const(0.5 / tau)
    b = simulate_batch(P[0], B, M, CFG, 20_000, potentials=[q], stream=4)
    cert = est.khasminskii_certificate(q, B, M, CFG, 20_000, P, batches=[b])
    g = est.gauge(P[0], q, B, M, CFG, batch=b)
    assert 0.4 < cert.eta < 0.6
    assert g.value - 3 * g.stderr <= cert.bound


def _ests(vals):
    return [est.Estimate(v, 0.01 * v, 100) for v in vals]


def test_harnack_report_properties():
    P = np.array([[0.0, 0, 0], [0.1, 0, 0], [0, 0.2, 0]])
    r1 = est.harnack_report(_ests([2.0, 2.0, 2.0]), B, P)
    assert r1.ratio == 1.0
    vals = [1.0, 3.0, 2.0]
    a = est.harnack_report(_ests(vals), B, P)
    b = est.harnack_report(_ests([7.3 * v for v in vals]), B, P)
    assert a.ratio == pytest.approx(b.ratio, rel=1e-15) and a.witness == b.witness == (1, 0)
    with pytest.raises(NonPositiveValue):
        est.harnack_report(_ests([1.0, 0.0, 1.0]), B, P)
    with pytest.raises(ValueError):
        est.harnack_report(_ests([1.0]), B, [[0.4, 0, 0]])


def test_carleson_and_bhp_trivial_cases():
    ch = BoundaryChart.at(B, [1, 0, 0])
    r = 0.45 * ch.R1
    xr = est.carleson_reference(ch, r)
    ref = est.Estimate(0.4, 0.01, 100)
    rep = est.carleson_report(ch, r, [ref], [xr], ref=ref)
    assert rep.ratio == 1.0
    P = np.array([ch.normal_point(0.1 * r), ch.normal_point(0.2 * r)])
    u = lambda p: est.Estimate(float(B.delta(p)) * 3.0, 0.0, 10)
    a = est.carleson_report(ch, r, u, P)
    b = est.carleson_report(ch, r, lambda p: u(p).scaled(5.0), P)
    assert a.ratio == pytest.approx(b.ratio, rel=1e-14)
    bhp = est.bhp_report(ch, r, u, [(P[0], P[0])])
    assert bhp.ratio == 1.0
    bb = est.bhp_report(ch, r, lambda p: u(p).scaled(4.0), [(P[0], P[1]), (P[1], P[0])])
    ba = est.bhp_report(ch, r, u, [(P[0], P[1]), (P[1], P[0])])
    assert ba.ratio == pytest.approx(bb.ratio, rel=1e-14) and ba.witness == bb.witness
    with pytest.raises(ReferenceDegenerate):
        est.carleson_report(ch, r, u, P, ref=est.Estimate(0.0, 0.1, 10))
    with pytest.raises(ValueError):
        est.carleson_report(ch, r, u, [[0.0, 0, 0]], ref=ref)


def test_double_ratio():
    u = _ests([1.0, 2.0, 4.0])
    v = _ests([2.0, 4.0, 8.0])
    assert est.double_ratio_report(u, v).ratio == pytest.approx(1.0)


def test_boundary_exit_linearity_table():
    ch = BoundaryChart.at(B, [1, 0, 0])
    cfg = PathConfig.for_radius(ch.r0, seed=1)
    depths = ch.delta0 * np.array([0.1, 0.3, 0.6, 0.9])
    t = est.boundary_exit_linearity(ch, M, cfg, depths, n_paths=4000)
    assert np.all((t.p_box >= 0) & (t.p_box <= 1) & (t.p_in_B >= 0) & (t.p_in_B <= 1))
    assert t.slope_box > 0 and t.slope_in_B > 0
    assert len(t.rows()) == 4
    with pytest.raises(ValueError):
        est.boundary_exit_linearity(ch, M, cfg, [ch.delta0], n_paths=10)
