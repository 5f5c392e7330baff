import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumplab.errors import ConfigError, RejectionStall, TimeBudgetExceeded
from jumplab.fields import Diffusion, JumpKernel, Potential
from jumplab.geometry import BallDomain
from jumplab.model import OperatorModel, preset
from jumplab.sim import (PathConfig, drift_from_divergence, jump_rate, sample_jump,
                         simulate_batch, simulate_until_exit)

B = BallDomain(np.zeros(3), 0.5)
CFG = PathConfig.for_radius(0.5, seed=5)


def test_drift_examples():
    m = preset("identity")
    assert np.array_equal(drift_from_divergence(m, [0.3, 0.1, 0.2]), np.zeros(3))
    mq = OperatorModel(3, Diffusion.diag_quadratic(1.0), JumpKernel.default())
    assert np.allclose(drift_from_divergence(mq, [1.0, 0, 0]), [1.0, 0, 0])


def test_drift_matches_finite_differences():
    m = OperatorModel(3, Diffusion.sin_offdiag(0.1), JumpKernel.default())
    rng = np.random.default_rng(3)
    h = 1e-5
    for x in rng.uniform(-1, 1, (10, 3)):
        b = np.zeros(3)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            da = (m.diffusion.matrix(x + e) - m.diffusion.matrix(x - e)) / (2 * h)
            b += 0.5 * da[i]
        assert np.allclose(drift_from_divergence(m, x), b, atol=1e-9)


def test_jump_rate_closed_forms():
    m1 = preset("identity", c=1.0, alpha=1.0)
    assert jump_rate(m1, 1.0) == pytest.approx(4 * math.pi, rel=1e-15)
    assert jump_rate(m1, 1.0, truncated=True) == 0.0
    m2 = preset("identity", c=1.0, alpha=0.5)
    assert jump_rate(m2, 0.25) == pytest.approx(16 * math.pi, rel=1e-14)
    with pytest.raises(ValueError):
        jump_rate(m1, 0.0)


def test_sample_jump_laws():
    m = preset("identity")
    rng = np.random.default_rng(0)
    h = sample_jump(m, np.zeros(3), 0.1, rng=rng, size=100_000)
    r = np.linalg.norm(h, axis=1)
    assert r.min() >= 0.1
    # direction symmetry: mean of the unit vectors vanishes
    u = h / r[:, None]
    assert np.all(np.abs(u.mean(axis=0)) <= 4 * u.std(axis=0) / math.sqrt(u.shape[0]))
    p = np.mean(r > 0.2)
    assert abs(p - 0.5) <= 4 * math.sqrt(0.25 / r.size)
    ht = sample_jump(m, np.zeros(3), 0.5, truncated=True, rng=rng, size=20_000)
    rt = np.linalg.norm(ht, axis=1)
    assert rt.min() > 0.5 and rt.max() < 1.0


def test_sample_jump_thinning_and_stall():
    k = JumpKernel.sin_modulated(0.9, 1.0, amp=0.1)
    m = OperatorModel(3, Diffusion.identity(), k)
    h = sample_jump(m, np.zeros(3), 0.1, rng=np.random.default_rng(1), size=1000)
    assert h.shape == (1000, 3)
    tiny = JumpKernel.custom(lambda x, y: 1e-6 * np.linalg.norm(x - y) ** -4.0, 1.0, 1.0, envelope=1.0)
    with pytest.raises(RejectionStall):
        sample_jump(OperatorModel(3, Diffusion.identity(), tiny), np.zeros(3), 0.1,
                    rng=np.random.default_rng(2), size=10)


def test_config_validation():
    with pytest.raises(ConfigError):
        PathConfig(dt=0.0, eps=0.1)
    with pytest.raises(ConfigError):
        PathConfig(dt=0.1, eps=1.5)
    with pytest.raises(ConfigError):
        PathConfig(dt=0.1, eps=0.1, small_jumps="keep")
    cfg = PathConfig.for_radius(0.5)
    assert cfg.dt == 0.5 ** 2 / 500 and cfg.eps == 0.05
    assert cfg.budget(B) == 1e4 * 0.25


def test_zero_potential_gives_unit_weight():
    b = simulate_batch(np.zeros(3), B, preset("identity"), CFG, 500)
    assert np.all(b.q_integral == 0.0)
    assert simulate_until_exit(np.zeros(3), B, preset("identity"), CFG).e_q == 1.0


def test_exit_dichotomy():
    b = simulate_batch(np.array([0.1, 0.2, 0.0]), B, preset("identity"), CFG, 4000)
    r = np.linalg.norm(b.x_exit, axis=1)
    assert np.all(r[b.via_jump] > 0.5)
    assert np.allclose(r[~b.via_jump], 0.5, atol=1e-12)
    assert b.via_jump.any() and (~b.via_jump).any()


def test_potential_monotonicity_on_shared_paths():
    q1 = Potential.const(-1.0)
    q2 = Potential.bump([0, 0, 0], 0.2, 3.0)
    b = simulate_batch(np.zeros(3), B, preset("identity"), CFG, 2000, potentials=[q1, q2])
    assert np.all(b.q_integral[:, 0] <= b.q_integral[:, 1])
    # |q| integrals agree with tau for the constant
    assert np.allclose(b.q_abs[:, 0], b.tau, rtol=1e-12)


def test_brownian_exit_time():
    m = preset("brownian-diagnostic")
    U = BallDomain(np.zeros(3), 1.0)
    b = simulate_batch(np.zeros(3), U, m, PathConfig.for_radius(1.0, seed=9), 20_000)
    se = b.tau.std() / math.sqrt(b.tau.size)
    assert abs(b.tau.mean() - 1 / 3) <= 3 * se + 0.005
    assert not b.via_jump.any()


def test_pure_jump_paths_exit_by_jumping():
    m = preset("stable-diagnostic")
    b = simulate_batch(np.zeros(3), B, m, CFG, 3000)
    assert b.via_jump.all()


def test_determinism_and_worker_independence():
    m = preset("identity", potential="const:-0.5")
    x = np.array([0.1, -0.1, 0.05])
    a = simulate_batch(x, B, m, CFG, 5000, workers=1)
    b = simulate_batch(x, B, m, CFG, 5000, workers=3)
    for f in ("tau", "x_exit", "x_pre", "via_jump", "q_integral", "steps", "n_jumps"):
        assert np.array_equal(getattr(a, f), getattr(b, f)), f
    rec = simulate_until_exit(x, B, m, CFG, path=4321)
    assert rec.tau == a.tau[4321] and np.array_equal(rec.x_exit, a.x_exit[4321])
    other = simulate_batch(x, B, m, replace(CFG, seed=6), 50)
    assert not np.array_equal(other.tau, a.tau[:50])


@given(st.integers(0, 10_000), st.integers(0, 3))
@settings(max_examples=15, deadline=None)
def test_single_path_reproducible(path, stream):
    m = preset("identity")
    r1 = simulate_until_exit(np.zeros(3), B, m, CFG, path=path, stream=stream)
    r2 = simulate_until_exit(np.zeros(3), B, m, CFG, path=path, stream=stream)
    assert r1.tau == r2.tau and np.array_equal(r1.x_exit, r2.x_exit)


def test_censoring():
    cfg = replace(CFG, t_max=1e-3)
    with pytest.raises(TimeBudgetExceeded) as info:
        simulate_until_exit(np.zeros(3), B, preset("brownian-diagnostic"), cfg)
    assert info.value.record.censored


def test_exit_time_two_sided_scaling():
    # E tau / R^2 stays inside a fixed band across scales (not a constant: jumps
    # matter relatively more on larger balls)
    m = preset("identity")
    ratios = []
    for R in (0.25, 0.5, 1.0):
        b = simulate_batch(np.zeros(3), BallDomain(np.zeros(3), R), m,
                           PathConfig.for_radius(R, seed=2), 10_000)
        ratios.append(b.tau.mean() / R ** 2)
    # measured 0.128, 0.078, 0.044
    assert all(0.02 < r < 1 / 3 + 0.01 for r in ratios)
    assert max(ratios) / min(ratios) < 4.0
    assert ratios[0] > ratios[1] > ratios[2]


def test_refinement_consistency():
    m = preset("identity")
    f = lambda y: (y @ np.array([1.0, 0.37, 0.21]) > 0).astype(float)
    x = np.array([0.1, 0.05, -0.1])
    means = []
    for cfg in (CFG, replace(CFG, dt=CFG.dt / 2, eps=CFG.eps / 2)):
        b = simulate_batch(x, B, m, cfg, 20_000)
        v = f(b.x_exit)
        means.append((v.mean(), v.std() / math.sqrt(v.size)))
    (a, sa), (b_, sb) = means
    assert abs(a - b_) <= 3 * math.hypot(sa, sb) + 0.02
