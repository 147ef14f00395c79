import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from agentsim.spatial.grid import (
    NotInGridError,
    UniformGrid,
    brute_force_neighbors,
    neighbor_pairs,
    sort_and_balance,
)
from agentsim.spatial.morton import (
    MortonOverflowError,
    compute_morton_offsets,
    enumerate_codes,
    morton_decode,
    morton_encode,
)

from .conftest import make_store

BACKENDS = ("numba", "numpy")
coords = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_agent_box(backend):
    g = UniformGrid(backend).build(np.zeros((1, 3)), interaction_length=2.0)
    b = int(g.agent_box[0])
    assert g.box_size[b] == 1
    assert g.box_members(b) == [0]
    occupied = [k for k in range(g.num_boxes) if g.box_members(k)]
    assert occupied == [b]


@pytest.mark.parametrize("backend", BACKENDS)
def test_half_box_apart_both_found(backend):
    pos = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    g = UniformGrid(backend).build(pos, interaction_length=2.0)
    assert g.neighbors(0).tolist() == [1]
    assert g.neighbors(1).tolist() == [0]


@pytest.mark.parametrize("backend", BACKENDS)
def test_rebuild_forgets_previous_contents(backend):
    g = UniformGrid(backend)
    g.build(np.array([[0.0, 0, 0], [0.5, 0, 0], [0.7, 0, 0]]), interaction_length=1.0)
    g.build(np.array([[0.0, 0, 0], [9.0, 9, 9]]), interaction_length=1.0)
    assert g.neighbors(0).size == 0
    assert sum(len(g.box_members(k)) for k in range(g.num_boxes)) == 2


@pytest.mark.parametrize("backend", BACKENDS)
def test_radius_edge(backend):
    r = 2.0
    for frac, expect in ((0.99, [1]), (1.01, [])):
        pos = np.array([[0.0, 0, 0], [r * frac, 0, 0]])
        g = UniformGrid(backend).build(pos, interaction_length=r)
        assert g.neighbors(0, r).tolist() == expect
        assert g.neighbors(1, r).tolist() == [0] if expect else g.neighbors(1, r).size == 0


def test_query_radius_above_box_length_rejected():
    g = UniformGrid().build(np.zeros((2, 3)), interaction_length=1.0)
    with pytest.raises(ValueError):
        g.neighbors(0, 5.0)
    with pytest.raises(NotInGridError):
        g.neighbors(7)


@pytest.mark.parametrize("backend", BACKENDS)
@given(pos=arrays(np.float64, st.tuples(st.integers(1, 80), st.just(3)), elements=coords),
       radius=st.floats(0.5, 30.0))
def test_grid_equals_brute_force(backend, pos, radius):
    g = UniformGrid(backend).build(pos, interaction_length=radius)
    for i in range(len(pos)):
        assert np.array_equal(np.sort(g.neighbors(i, radius)), brute_force_neighbors(pos, i, radius))


@given(pos=arrays(np.float64, st.tuples(st.integers(1, 60), st.just(3)), elements=coords),
       radius=st.floats(0.5, 20.0))
def test_brute_force_symmetric(pos, radius):
    sets = [set(brute_force_neighbors(pos, i, radius).tolist()) for i in range(len(pos))]
    assert brute_force_neighbors(pos[:1], 0, radius).size == 0
    for a, s in enumerate(sets):
        for b in s:
            assert a in sets[b]


@given(pos=arrays(np.float64, st.tuples(st.integers(1, 60), st.just(3)), elements=coords),
       radius=st.floats(0.5, 20.0))
def test_neighbor_pairs_csr_matches(pos, radius):
    n = len(pos)
    indptr, idx = neighbor_pairs(pos, n, n, radius)
    for i in range(n):
        assert np.array_equal(np.sort(idx[indptr[i]:indptr[i + 1]]), brute_force_neighbors(pos, i, radius))


@given(pos=arrays(np.float64, st.tuples(st.integers(1, 60), st.just(3)), elements=coords))
def test_incremental_updates_keep_chains_consistent(pos):
    g = UniformGrid("numba").build(pos.copy(), interaction_length=5.0)
    if len(pos) > 1:
        g.remove(0)
        assert not g.contains(0)
        g.add(0)
    total = sum(len(g.box_members(k)) for k in range(g.num_boxes))
    assert total == len(pos)
    for k in range(g.num_boxes):
        assert len(g.box_members(k)) == (g.box_size[k] if g.box_timestamp[k] == g.current_stamp else 0)


# -- morton -------------------------------------------------------------------


def test_morton_2d_examples():
    assert morton_encode(0, 0) == 0
    assert morton_encode(1, 1) == 3
    assert enumerate_codes((3, 3)).tolist() == [0, 1, 2, 3, 4, 6, 8, 9, 12]


def test_morton_3x3_offsets():
    off = compute_morton_offsets((3, 3))
    # rank 8 holds code 12, so its offset is 4
    assert off.entries == [(0, 0), (5, 1), (6, 2), (8, 4)]
    assert off.codes().tolist() == [0, 1, 2, 3, 4, 6, 8, 9, 12]


def test_power_of_two_single_entry():
    assert compute_morton_offsets((4, 4)).entries == [(0, 0)]
    assert compute_morton_offsets((8, 8, 8)).entries == [(0, 0)]


def test_morton_overflow():
    with pytest.raises(MortonOverflowError):
        morton_encode(1 << 21, 0, 0)
    with pytest.raises(MortonOverflowError):
        morton_encode(-1, 0)


@given(st.tuples(st.integers(1, 33), st.integers(1, 33), st.integers(1, 33)))
def test_offsets_match_enumeration_3d(dims):
    assert np.array_equal(compute_morton_offsets(dims).codes(), enumerate_codes(dims))


@given(st.tuples(st.integers(1, 17), st.integers(1, 17)))
def test_offsets_match_enumeration_2d(dims):
    assert np.array_equal(compute_morton_offsets(dims).codes(), enumerate_codes(dims))


@given(st.lists(st.tuples(st.integers(0, 2**21 - 1), st.integers(0, 2**21 - 1), st.integers(0, 2**21 - 1)),
                min_size=1, max_size=20))
def test_encode_decode_roundtrip(pts):
    a = np.array(pts, dtype=np.uint64)
    code = morton_encode(a[:, 0], a[:, 1], a[:, 2])
    x, y, z = morton_decode(code)
    assert np.array_equal(np.stack([x, y, z], axis=1), a)


@given(st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9)))
def test_offsets_sorted(dims):
    off = compute_morton_offsets(dims)
    assert np.all(np.diff(off.box_counter) > 0)
    assert np.all(np.diff(off.offset) >= 0)


# -- sorting and balancing -------------------------------------------------------


def test_morton_order_example():
    # box length 1; one agent in box (0,0,0), two in box (2,2,0): code 12 in the x/y plane
    pos = np.array([[2.5, 2.5, 0.5], [0.5, 0.5, 0.5], [2.6, 2.4, 0.5]])
    s = make_store(3, positions=pos)
    g = UniformGrid().build(s.position, 3, 1.0)
    sort_and_balance(s, g, 1)
    assert int(s.rng_key[0]) == 1


@pytest.mark.parametrize("backend", BACKENDS)
def test_sorted_store_is_fixed_point(backend):
    pos = np.random.default_rng(0).uniform(0, 20, (200, 3))
    s = make_store(200, positions=pos)
    g = UniformGrid(backend).build(s.position, 200, 2.0)
    sort_and_balance(s, g, 4)
    first = s.rng_key[:200].copy()
    plan = sort_and_balance(s, g, 4)
    assert np.array_equal(plan.old_to_new, np.arange(200))
    assert np.array_equal(s.rng_key[:200], first)


@pytest.mark.parametrize("backend", BACKENDS)
@given(pos=arrays(np.float64, st.tuples(st.integers(1, 150), st.just(3)), elements=st.floats(0, 30)),
       workers=st.integers(1, 8))
def test_balance_and_query_invariance(backend, pos, workers):
    n = len(pos)
    s = make_store(n, positions=pos.copy())
    g = UniformGrid(backend).build(s.position, n, 3.0)
    before = {int(s.rng_key[i]): set(s.rng_key[g.neighbors(i, 3.0)].tolist()) for i in range(n)}
    plan = sort_and_balance(s, g, workers)
    # ranges are contiguous, disjoint and cover everything
    assert plan.boundaries[0][0] == 0 and plan.boundaries[-1][1] == n
    assert all(a[1] == b[0] for a, b in zip(plan.boundaries, plan.boundaries[1:]))
    sizes = plan.sizes
    largest_box = int(g.box_size[g.box_timestamp == g.current_stamp].max())
    assert max(sizes) - min(sizes) <= max(largest_box, 1) + 1
    after = {int(s.rng_key[i]): set(s.rng_key[g.neighbors(i, 3.0)].tolist()) for i in range(n)}
    assert before == after


def test_occupancy_csv():
    g = UniformGrid().build(np.array([[0.0, 0, 0], [0.1, 0, 0], [5.0, 5, 5]]), interaction_length=1.0)
    lines = g.occupancy_csv().strip().splitlines()
    assert lines[0] == "box_index,morton_code,count"
    assert sorted(int(l.split(",")[2]) for l in lines[1:]) == [1, 2]
