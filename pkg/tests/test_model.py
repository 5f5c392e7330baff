import math

import numpy as np
import pytest

from jumplab.errors import ConfigError, NonPositiveDefinite, NonSymmetricMatrix
from jumplab.fields import Diffusion, JumpKernel, Potential
from jumplab.model import (OperatorModel, ellipticity_bounds, kato_norm, kernel_sandwich_check,
                           parse_potential, preset)


def test_presets():
    m = preset("identity")
    assert m.paper_mode and m.c == 1.0 and m.alpha == 1.0
    assert not preset("brownian-diagnostic").jumps_enabled
    assert not preset("stable-diagnostic").diffusion_enabled
    with pytest.raises(ConfigError):
        preset("nope")


def test_model_validation():
    k = JumpKernel.default()
    with pytest.raises(ConfigError):
        OperatorModel(2, Diffusion.identity(), k)
    with pytest.raises(ConfigError):
        OperatorModel(3, Diffusion.identity(), JumpKernel.default(1.0, 2.0))
    with pytest.raises(ConfigError):
        OperatorModel(3, Diffusion.identity(), k, diffusion_enabled=False, jumps_enabled=False)


def test_parse_potential():
    assert parse_potential("zero").is_zero
    assert parse_potential("const:-0.5")(np.zeros(3)) == -0.5
    q = parse_potential("bump:0.1,0,0:0.25:20")
    assert q(np.array([0.1, 0, 0])) == 20.0
    for bad in ("bump:0,0:0.25:1", "const:x", "sin:1"):
        with pytest.raises(ConfigError):
            parse_potential(bad)


def test_ellipticity_identity_and_diagonal():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (20, 3))
    assert ellipticity_bounds(preset("identity"), X) == (1.0, 1.0)
    m = OperatorModel(3, Diffusion.constant(np.diag([0.5, 1.0, 2.0])), JumpKernel.default())
    assert ellipticity_bounds(m, X) == pytest.approx((0.5, 2.0), rel=1e-15)


def test_ellipticity_matches_dense_eigensolver():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((100, 3))
    X *= rng.uniform(0, 1, (100, 1)) / np.linalg.norm(X, axis=1, keepdims=True)
    m = preset("variable-spd", spd_eps=0.1)
    ev = []
    for x in X:
        A = np.eye(3) + 0.1 * np.outer(x, x) / (1 + x @ x)
        ev.append(np.linalg.eigvalsh(A))
    ev = np.array(ev)
    lo, hi = ellipticity_bounds(m, X)
    assert lo == pytest.approx(ev[:, 0].min(), rel=1e-13)
    assert hi == pytest.approx(ev[:, -1].max(), rel=1e-13)


def test_ellipticity_errors():
    k = JumpKernel.default()
    asym = OperatorModel(3, Diffusion.constant([[1, 0.5, 0], [0, 1, 0], [0, 0, 1]]), k)
    with pytest.raises(NonSymmetricMatrix):
        ellipticity_bounds(asym, np.zeros((1, 3)))
    indef = OperatorModel(3, Diffusion.constant(np.diag([1.0, -1.0, 1.0])), k)
    with pytest.raises(NonPositiveDefinite):
        ellipticity_bounds(indef, np.zeros((1, 3)))


def test_kato_norm_examples():
    assert kato_norm(Potential.zero(), 0.3) == 0.0
    v = kato_norm(Potential.const(1.0), 0.25, probes=[[0, 0, 0]])
    assert v == pytest.approx(2 * math.pi * 0.25 ** 2, rel=1e-6)
    ind = Potential.ball_indicator([0, 0, 0], 0.1, 1.0)
    v = kato_norm(ind, 0.2, probes=[[0, 0, 0]])
    assert v == pytest.approx(2 * math.pi * 0.1 ** 2, rel=1e-3)


def test_kato_norm_shrinks_with_r():
    q = Potential.bump([0, 0, 0], 0.2, 5.0)
    vals = [kato_norm(q, r, probes=[[0, 0, 0], [0.1, 0, 0]]) for r in (0.2, 0.1, 0.05)]
    assert vals[0] > vals[1] > vals[2] > 0


def test_kernel_sandwich():
    rng = np.random.default_rng(2)
    X, Y = rng.uniform(-1, 1, (1000, 3)), rng.uniform(-1, 1, (1000, 3))
    assert kernel_sandwich_check(preset("identity"), (X, Y)).violations == 0
    k15 = JumpKernel.custom(lambda x, y: 1.5 * np.linalg.norm(x - y) ** -4.0, 1.0, 1.0, envelope=1.5)
    rep = kernel_sandwich_check(OperatorModel(3, Diffusion.identity(), k15), (X, Y))
    assert rep.upper_violations == 1000
    assert rep.worst_ratio == pytest.approx(1.5, rel=1e-12)
    ks = JumpKernel.sin_modulated(0.9, 1.0, amp=0.1)
    rep = kernel_sandwich_check(OperatorModel(3, Diffusion.identity(), ks), (X, Y))
    # direct oracle: 1 + 0.1 sin(x1 + y1) lies in [0.9, 1/0.9]
    r = 1 + 0.1 * np.sin(X[:, 0] + Y[:, 0])
    assert ((r < 0.9) | (r > 1 / 0.9)).sum() == 0
    assert rep.violations == 0
