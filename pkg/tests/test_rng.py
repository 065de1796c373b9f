import numpy as np
import pytest

from enkbf_nmpc.rng import RngStreams, as_streams


def test_same_key_same_draws_and_distinct_keys_differ():
    s = RngStreams(42)
    np.testing.assert_array_equal(s.normal(5, "innovation", 3), RngStreams(42).normal(5, "innovation", 3))
    assert not np.array_equal(s.normal(5, "innovation", 3), s.normal(5, "innovation", 4))
    assert not np.array_equal(s.normal(5, "innovation", 3), RngStreams(43).normal(5, "innovation", 3))


def test_draw_order_does_not_matter():
    s = RngStreams(1)
    a = [s.normal(3, "rep", r) for r in range(4)]
    b = [s.normal(3, "rep", r) for r in reversed(range(4))][::-1]
    np.testing.assert_array_equal(a, b)


def test_child_streams_prefix_keys():
    s = RngStreams(5)
    np.testing.assert_array_equal(s.child("rep", 2).normal(4, "k", 1), s.normal(4, "rep", 2, "k", 1))
    np.testing.assert_array_equal(s.child("rep").child(2).normal(4), s.normal(4, "rep", 2))


def test_streams_look_independent():
    s = RngStreams(0)
    a, b = s.normal(20000, "a"), s.normal(20000, "b")
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.03
    assert abs(a.mean()) < 0.03 and abs(a.std() - 1) < 0.03


def test_as_streams_and_key_validation():
    assert as_streams(None).seed == 0
    assert as_streams(7).seed == 7
    s = RngStreams(3)
    assert as_streams(s) is s
    with pytest.raises(TypeError):
        as_streams("seed")
    with pytest.raises(ValueError):
        s.generator(-1)
