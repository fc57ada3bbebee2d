import numpy as np
import pytest

from dpsgd.rng import INDEX_TAG, NOISE_TAG, CounterStream


def test_random_access_matches_sequential():
    a = CounterStream(7, 3, 5)
    seq = [a.normal(k).copy() for k in range(600)]
    b = CounterStream(7, 3, 5)
    for k in (599, 0, 300, 255, 256, 1):
        np.testing.assert_array_equal(b.normal(k), seq[k])


def test_streams_are_independent_by_node_tag_seed():
    base = CounterStream(1, 0, 4).raw(0)
    assert not np.array_equal(base, CounterStream(1, 1, 4).raw(0))
    assert not np.array_equal(base, CounterStream(2, 0, 4).raw(0))
    assert not np.array_equal(base, CounterStream(1, 0, 4, INDEX_TAG).raw(0))
    assert NOISE_TAG != INDEX_TAG


def test_width_layout_is_contiguous():
    # iteration k of a width-w stream is words [k w, (k + 1) w) of the key
    wide = CounterStream(5, 2, 3)
    narrow = CounterStream(5, 2, 1)
    flat = np.concatenate([narrow.raw(k) for k in range(12)])
    np.testing.assert_array_equal(np.concatenate([wide.raw(k) for k in range(4)]), flat)


def test_uniform_and_integer_ranges():
    s = CounterStream(0, 0, 1000)
    u = s.uniform(3)
    assert u.min() > 0 and u.max() < 1
    i = s.integers(3, 7)
    assert i.min() >= 0 and i.max() <= 6


def test_normal_moments():
    s = CounterStream(11, 0, 10000)
    z = s.normal(0)
    assert abs(z.mean()) < 0.05 and abs(z.std() - 1) < 0.05


def test_bad_arguments():
    with pytest.raises(ValueError):
        CounterStream(-1, 0, 1)
    with pytest.raises(ValueError):
        CounterStream(0, 0, 0)
    with pytest.raises(ValueError):
        CounterStream(0, 0, 1).normal(-1)
