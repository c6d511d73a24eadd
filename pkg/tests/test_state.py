import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coagfrag.state import CapacityError, ClusterState, PointConfiguration

sizes_strategy = st.lists(
    st.floats(min_value=1e-6, max_value=1e6, allow_nan=False, allow_infinity=False),
    min_size=1,
    max_size=40,
)


def test_merge_example():
    s = ClusterState([3.0, 2.0, 1.0])
    s.merge(0, 2)
    np.testing.assert_array_equal(s.sizes, [4.0, 2.0])


def test_merge_two_ones():
    s = ClusterState([1.0, 1.0])
    s.merge(0, 1)
    np.testing.assert_array_equal(s.sizes, [2.0])


def test_merge_errors():
    s = ClusterState([3.0, 2.0])
    with pytest.raises(ValueError):
        s.merge(1, 1)
    with pytest.raises(IndexError):
        s.merge(0, 5)


def test_split_examples():
    s = ClusterState([4.0, 2.0])
    s.split(0, 1.5)
    np.testing.assert_array_equal(s.sizes, [2.5, 2.0, 1.5])
    s2 = ClusterState([2.0])
    s2.split(0, 1.0)
    np.testing.assert_array_equal(s2.sizes, [1.0, 1.0])


def test_split_errors():
    s = ClusterState([2.0])
    for y in (0.0, 2.0, -1.0, 2.5):
        with pytest.raises(ValueError):
            s.split(0, y)
    with pytest.raises(IndexError):
        s.split(3, 0.5)


def test_split_point_config_difference():
    s = ClusterState([4.0, 2.0])
    before = dict(s.to_point_config().atoms)
    s.split(0, 1.5)
    after = dict(s.to_point_config().atoms)
    delta = {k: after.get(k, 0) - before.get(k, 0) for k in set(before) | set(after)}
    assert delta == {4.0: -1, 2.5: 1, 1.5: 1, 2.0: 0}


def test_dilate_and_normalize():
    s = ClusterState([1.0, 0.5])
    s.dilate(2.0)
    np.testing.assert_array_equal(s.sizes, [2.0, 1.0])
    t = ClusterState([2.0, 1.0, 1.0]).normalize()
    np.testing.assert_allclose(t.sizes, [0.5, 0.25, 0.25])
    assert t.total_mass == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        s.dilate(0.0)


def test_merge_dilate_commute():
    a = ClusterState([3.0, 2.0, 1.0]).merge(0, 1).dilate(2.0)
    b = ClusterState([3.0, 2.0, 1.0]).dilate(2.0).merge(0, 1)
    np.testing.assert_allclose(a.sizes, b.sizes, rtol=1e-15)


def test_power_sums():
    s = ClusterState([1.0, 1.0], power_exponents=(1.0, 2.0))
    assert s.power_sum(1.0) == s.total_mass
    assert s.power_sum(2.0) == 2.0
    assert s.power_sum(0.0) == 2.0
    # on the simplex, sum z**(1+a) <= 1 for a >= 0
    t = ClusterState(np.random.default_rng(0).dirichlet(np.ones(20)))
    for a in (0.0, 0.5, 2.0):
        assert t.power_sum(1.0 + a) <= t.total_mass ** (1.0 + a) + 1e-12


def test_mass_conservation_long_run():
    rng = np.random.default_rng(42)
    s = ClusterState(rng.uniform(0.1, 2.0, 50), power_exponents=(1.0, 2.0, 3.0))
    m0 = s.total_mass
    for k in range(10_000):
        if s.count >= 2 and rng.random() < 0.5:
            i, j = rng.choice(s.count, 2, replace=False)
            s.merge(int(i), int(j))
        else:
            i = int(rng.integers(s.count))
            z = s.sizes[i]
            s.split(i, z * rng.uniform(0.01, 0.99))
    assert abs(s.total_mass - m0) <= 1e-12 * m0 * 10_000
    s.check_coherence(rel_tol=1e-9)


def test_cache_rebuild_interval():
    s = ClusterState([2.0, 1.0], power_exponents=(1.0, 2.0))
    for _ in range(40_000):  # 80k mutations, crossing the rebuild threshold
        s.split(0, float(s.sizes[0]) / 2.0)
        s.merge(s.count - 1, s.count - 2)
    s.check_coherence()


@given(sizes_strategy, st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_merge_property(sizes, seed):
    rng = np.random.default_rng(seed)
    s = ClusterState(sizes)
    if s.count < 2:
        return
    m0, n0 = s.total_mass, s.count
    i, j = rng.choice(s.count, 2, replace=False)
    s.merge(int(i), int(j))
    assert s.count == n0 - 1
    assert abs(s.total_mass - m0) <= 1e-12 * max(m0, 1.0)
    assert np.all(np.diff(s.sizes) <= 0)


@given(sizes_strategy, st.floats(1e-6, 1 - 1e-6))
@settings(max_examples=60, deadline=None)
def test_split_property(sizes, frac):
    s = ClusterState(sizes)
    m0, n0 = s.total_mass, s.count
    y = float(s.sizes[0]) * frac
    if not 0.0 < y < float(s.sizes[0]):
        return
    s.split(0, y)
    assert s.count == n0 + 1
    assert abs(s.total_mass - m0) <= 1e-12 * max(m0, 1.0)
    assert np.all(np.diff(s.sizes) <= 0)
    s.check_coherence(rel_tol=1e-9)


def test_point_config_round_trip():
    s = ClusterState([3.0, 2.0, 2.0, 1.0, 1.0, 1.0])
    cfg = s.to_point_config()
    assert cfg.atoms == ((3.0, 1), (2.0, 2), (1.0, 3))
    assert cfg.total_mass == pytest.approx(s.total_mass)
    back = ClusterState.from_point_config(cfg)
    np.testing.assert_array_equal(back.sizes, s.sizes)


def test_csv_round_trip():
    s = ClusterState([math.pi, 1e-9, 2.5000000000000004])
    row = s.to_csv_row(7, 0.125)
    rid, t, back = ClusterState.from_csv_row(row)
    assert (rid, t) == (7, 0.125)
    np.testing.assert_array_equal(back.sizes, s.sizes)


def test_binary_round_trip():
    rng = np.random.default_rng(11)
    s = ClusterState(rng.uniform(1e-8, 1e8, 257))
    blob = s.to_binary()
    assert len(blob) == 8 + 257 * 8
    back = ClusterState.from_binary(blob)
    np.testing.assert_array_equal(back.sizes, s.sizes)


def test_capacity_guard():
    s = ClusterState([1.0], capacity=4)
    s.split(0, 0.5)
    s.split(0, 0.25)
    s.split(0, 0.125)
    with pytest.raises(CapacityError):
        s.split(0, 0.0625)


def test_empty_state_allowed():
    s = ClusterState([])
    assert s.count == 0
    assert s.total_mass == 0.0


def test_rejects_nonpositive_sizes():
    with pytest.raises(ValueError):
        ClusterState([1.0, 0.0])
    with pytest.raises(ValueError):
        ClusterState([1.0, -2.0])


def test_point_config_validation():
    with pytest.raises(ValueError):
        PointConfiguration([(0.0, 1)])
    with pytest.raises(ValueError):
        PointConfiguration([(1.0, 0)])
