import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from jumplab.rng import StreamFactory


@given(st.integers(0, 2 ** 32), st.integers(0, 10 ** 6), st.integers(0, 10 ** 4))
@settings(max_examples=30, deadline=None)
def test_streams_are_reproducible(seed, path, stream):
    a = StreamFactory(seed).raw(path, stream, 16)
    b = StreamFactory(seed).raw(path, stream, 16)
    assert np.array_equal(a, b)


def test_streams_differ():
    f = StreamFactory(1)
    a = f.raw(0, 0, 8)
    assert not np.array_equal(a, f.raw(1, 0, 8))
    assert not np.array_equal(a, f.raw(0, 1, 8))
    assert not np.array_equal(a, StreamFactory(2).raw(0, 0, 8))


def test_uniform_and_normal_laws():
    f = StreamFactory(11)
    u = f.uniform(3, 5, 200_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert stats.kstest(u, "uniform").pvalue > 1e-3
    z = f.normal(3, 6, 200_000)
    assert stats.kstest(z, "norm").pvalue > 1e-3
