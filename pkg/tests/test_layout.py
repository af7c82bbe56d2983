import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossre.layout import (
    BalancedLayout,
    ResponseTable,
    averages,
    center_two_way,
    flat_index,
    unflat_index,
)


def test_layout_dimensions():
    layout = BalancedLayout(3, 4, 2)
    assert layout.n == 24
    assert layout.shape == (3, 4, 2)
    assert BalancedLayout(2, 2).m == 1


@pytest.mark.parametrize("bad", [(1, 3, 1), (3, 1, 1), (3, 3, 0)])
def test_layout_rejects_degenerate_sizes(bad):
    with pytest.raises(ValueError):
        BalancedLayout(*bad)


def test_layout_rejects_non_integers():
    with pytest.raises(TypeError):
        BalancedLayout(3.0, 4, 2)
    with pytest.raises(TypeError):
        BalancedLayout(True, 4, 2)


def test_flat_index_order():
    layout = BalancedLayout(3, 4, 2)
    # replicate fastest, then column, then row
    assert flat_index(layout, 0, 0, 0) == 0
    assert flat_index(layout, 0, 0, 1) == 1
    assert flat_index(layout, 0, 1, 0) == 2
    assert flat_index(layout, 1, 0, 0) == 8
    assert flat_index(layout, 2, 3, 1) == 23


def test_flat_index_bounds():
    layout = BalancedLayout(3, 4, 2)
    with pytest.raises(IndexError):
        flat_index(layout, 3, 0, 0)
    with pytest.raises(IndexError):
        flat_index(layout, 0, 4, 0)
    with pytest.raises(IndexError):
        flat_index(layout, 0, 0, 2)
    with pytest.raises(IndexError):
        unflat_index(layout, 24)


@given(
    g=st.integers(2, 6),
    h=st.integers(2, 6),
    m=st.integers(1, 4),
    data=st.data(),
)
def test_flat_unflat_round_trip(g, h, m, data):
    layout = BalancedLayout(g, h, m)
    i = data.draw(st.integers(0, g - 1))
    j = data.draw(st.integers(0, h - 1))
    k = data.draw(st.integers(0, m - 1))
    pos = flat_index(layout, i, j, k)
    assert 0 <= pos < layout.n
    assert unflat_index(layout, pos) == (i, j, k)


def test_response_table_accepts_flat_and_cube():
    layout = BalancedLayout(2, 2, 2)
    flat = ResponseTable(layout, np.arange(8.0))
    cube = ResponseTable(layout, np.arange(8.0).reshape(2, 2, 2))
    np.testing.assert_array_equal(flat.values, cube.values)
    assert flat.table().shape == (2, 2, 2)


def test_response_table_rejects_bad_input():
    layout = BalancedLayout(2, 2, 2)
    with pytest.raises(ValueError, match="expected 8 responses"):
        ResponseTable(layout, np.arange(7.0))
    with pytest.raises(ValueError, match="non-finite"):
        ResponseTable(layout, [0.0, 1.0, np.nan, 3.0, 4.0, 5.0, 6.0, 7.0])


def test_averages_two_by_two():
    layout = BalancedLayout(2, 2, 1)
    avg = averages(np.array([1.0, 2.0, 3.0, 4.0]), layout)
    assert avg.grand == 2.5
    np.testing.assert_allclose(avg.row, [1.5, 3.5])
    np.testing.assert_allclose(avg.col, [2.0, 3.0])
    np.testing.assert_allclose(avg.cell, [[1.0, 2.0], [3.0, 4.0]])


def test_averages_with_replicates():
    layout = BalancedLayout(2, 2, 3)
    cube = np.zeros((2, 2, 3))
    cube[0, 0] = [1.0, 2.0, 3.0]
    cube[1, 1] = [4.0, 4.0, 4.0]
    avg = averages(ResponseTable(layout, cube))
    assert avg.cell[0, 0] == 2.0
    assert avg.cell[1, 1] == 4.0
    assert avg.grand == pytest.approx(1.5)


def test_averages_requires_layout_for_plain_arrays():
    with pytest.raises(TypeError):
        averages(np.arange(4.0))


def test_center_two_way_single_spike():
    spiked = np.array([[1.0, 0.0], [0.0, 0.0]])
    expected = np.array([[0.25, -0.25], [-0.25, 0.25]])
    np.testing.assert_allclose(center_two_way(spiked), expected)


@given(
    g=st.integers(2, 5),
    h=st.integers(2, 5),
    seed=st.integers(0, 2**32 - 1),
)
def test_center_two_way_annihilates_additive_structure(g, h, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(g, 1))
    b = rng.normal(size=(1, h))
    centered = center_two_way(a + b)
    np.testing.assert_allclose(centered, np.zeros((g, h)), atol=1e-12)


@given(
    g=st.integers(2, 5),
    h=st.integers(2, 5),
    seed=st.integers(0, 2**32 - 1),
)
def test_center_two_way_is_idempotent_with_zero_margins(g, h, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(g, h))
    once = center_two_way(x)
    np.testing.assert_allclose(once.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(once.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(center_two_way(once), once, atol=1e-12)
