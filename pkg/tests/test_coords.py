import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hdconv.coords import CoordinateMap, SparseTensor, load_tensor, quantize, save_tensor

coord_lists = st.lists(st.tuples(st.integers(-50, 50), st.integers(-50, 50), st.integers(-3, 3)),
                       max_size=200)


def test_insert_and_lookup_small():
    m = CoordinateMap(2)
    assert m.insert((1, 2)) == 0
    assert m.insert((1, 2)) == 0
    assert m.insert((3, 4)) == 1
    assert m.lookup((1, 2)) == 0
    assert m.lookup((9, 9)) is None
    assert (3, 4) in m and len(m) == 2


def test_lookup_many_against_dict(rng):
    coords = rng.integers(-1000, 1000, (100_000, 3))
    m = CoordinateMap(3)
    rows = m.insert_many(coords)
    ref: dict[tuple, int] = {}
    for c, r in zip(map(tuple, coords.tolist()), rows.tolist()):
        assert ref.setdefault(c, len(ref)) == r
    assert len(m) == len(ref)
    keys = np.array(list(ref.keys()))
    np.testing.assert_array_equal(m.lookup_many(keys), np.arange(len(ref)))
    np.testing.assert_array_equal(m.coordinates, keys)
    assert m.occupancy <= m.capacity / 2


@given(coord_lists)
def test_round_trip_property(seq):
    m = CoordinateMap(3)
    ref = {}
    for c in seq:
        assert m.insert(c) == ref.setdefault(c, len(ref))
    for c, r in ref.items():
        assert m.lookup(c) == r
    assert sorted(r for _, r in m.items()) == list(range(len(ref)))


@given(coord_lists, st.integers(1, 9))
def test_parallel_blocks_partition(seq, n_blocks):
    m = CoordinateMap(3)
    if seq:
        m.insert_many(np.array(seq))
    blocks = m.parallel_blocks(n_blocks)
    assert len(blocks) == n_blocks
    assert sum(len(b) for b in blocks) == m.occupancy
    joined = [e for b in blocks for e in b]
    assert joined == list(m.parallel_blocks(1)[0]) == list(m.items())


def test_four_blocks_over_hundred():
    rng = np.random.default_rng(0)
    m = CoordinateMap(2)
    while len(m) < 100:
        m.insert(tuple(rng.integers(0, 1000, 2)))
    flat = sorted(e for b in m.parallel_blocks(4) for e in b)
    assert flat == sorted(m.items())


def test_iteration_depends_only_on_insertion_order(rng):
    coords = rng.integers(-20, 20, (500, 4))
    a, _ = CoordinateMap.from_coordinates(coords)
    b, _ = CoordinateMap.from_coordinates(coords)
    assert list(a.items()) == list(b.items())
    np.testing.assert_array_equal(a.probe_lengths(), b.probe_lengths())


def test_copy_is_independent():
    m, _ = CoordinateMap.from_coordinates([[0, 0], [1, 1]])
    c = m.copy()
    c.insert((5, 5))
    assert len(m) == 2 and len(c) == 3


def test_dimension_checks():
    m = CoordinateMap(2)
    with pytest.raises(ValueError):
        m.insert((1, 2, 3))
    with pytest.raises(ValueError):
        CoordinateMap(0)


def test_quantize_examples():
    t, prov = quantize([[0.232], [0.238]], 0.01, [[1.0], [3.0]])
    assert t.coordinates.tolist() == [[23]]
    assert t.features.tolist() == [[2.0]]
    assert prov.tolist() == [0, 0]

    t, _ = quantize([[-0.005]], 0.01)
    assert t.coordinates.tolist() == [[-1]]

    t, prov = quantize([[0.11, 0.27], [0.11, 0.28]], 0.01)
    assert t.coordinates.tolist() == [[11, 27], [11, 28]]
    assert prov.tolist() == [0, 1]
    assert np.all(t.tensor_stride == 1)


def test_quantize_rejects_bad_input():
    with pytest.raises(ValueError, match="row 1"):
        quantize([[0.0], [np.nan]], 0.1)
    with pytest.raises(ValueError):
        quantize([[0.0]], 0.0)


@given(st.integers(0, 2**31), st.sampled_from([0.25, 0.5, 2.0, 4.0, 8.0]))
def test_quantize_scale_consistent(seed, k):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-3, 3, (50, 3))
    a, pa = quantize(pts, 0.125)
    b, pb = quantize(pts * k, 0.125 * k)
    np.testing.assert_array_equal(a.coordinates, b.coordinates)
    np.testing.assert_array_equal(pa, pb)


def test_merged_feature_is_mean(rng):
    feats = rng.standard_normal((10_000, 3))
    pts = rng.uniform(0, 0.999, (10_000, 1))
    t, _ = quantize(pts, 1.0, feats)
    assert len(t) == 1
    ref = np.array([sum(feats[:, j].tolist()) for j in range(3)]) / len(feats)
    np.testing.assert_allclose(t.features[0], ref, rtol=1e-12, atol=1e-15)


def test_quantize_deterministic(rng):
    pts = rng.uniform(-1, 1, (300, 4))
    feats = rng.standard_normal((300, 2))
    a, pa = quantize(pts, 0.1, feats)
    b, pb = quantize(pts, 0.1, feats)
    assert a.coordinates.tobytes() == b.coordinates.tobytes()
    assert a.features.tobytes() == b.features.tobytes()
    assert pa.tobytes() == pb.tobytes()


def test_batched_quantize_keeps_instances_apart():
    pts = np.array([[0.1, 0.1], [0.1, 0.1]])
    t, prov = quantize(pts, 1.0, batch=np.array([0, 1]))
    assert len(t) == 2 and t.batched
    assert t.batch_indices.tolist() == [0, 1]
    assert t.spatial_coordinates.tolist() == [[0, 0], [0, 0]]


def test_stride_invariant_enforced():
    m, _ = CoordinateMap.from_coordinates([[0, 2], [4, 6]])
    SparseTensor(m, np.zeros((2, 1)), np.array([2, 2]))
    with pytest.raises(ValueError):
        SparseTensor(m, np.zeros((2, 1)), np.array([4, 4]))
    with pytest.raises(ValueError):
        SparseTensor(m, np.zeros((3, 1)))


@pytest.mark.parametrize("fmt", ["binary", "csv"])
def test_tensor_serialization_round_trip(tmp_path, fmt, rng):
    pts = rng.uniform(-1, 1, (40, 3))
    t, _ = quantize(pts, 0.25, rng.standard_normal((40, 2)), batch=rng.integers(0, 2, 40))
    path = tmp_path / f"t.{fmt}"
    save_tensor(path, t, fmt)
    back = load_tensor(path)
    np.testing.assert_array_equal(back.coordinates, t.coordinates)
    np.testing.assert_array_equal(back.features, t.features)
    np.testing.assert_array_equal(back.tensor_stride, t.tensor_stride)
    assert back.batched == t.batched


def test_load_tensor_rejects_garbage(tmp_path):
    p = tmp_path / "junk"
    p.write_bytes(b"nothing to see")
    with pytest.raises(ValueError):
        load_tensor(p)
