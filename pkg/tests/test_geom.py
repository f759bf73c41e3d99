import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hdconv import geom
from hdconv.geom import RigidTransform
from hdconv.metrics import rotation_error


def _point_line_distance_sq(p, line):
    """Squared distance from 2D point p to the line a x + b y + c = 0 via its foot point."""
    a, b, c = line
    n = np.array([a, b])
    foot = p - (n @ p + c) / (n @ n) * n
    assert abs(n @ foot + c) < 1e-9 * max(1.0, abs(c))
    return float(np.sum((p - foot) ** 2))


# Line and plane datasets

def test_line_noise_free_inliers_on_line():
    ds = geom.sample_line_dataset(4, 200, 300, 0.0, seed=1)
    pattern = geom.pattern_from_params(ds.params)
    inl = ds.points[ds.labels == 1]
    assert len(inl) == 200 and len(ds) == 500
    assert pattern.distance(inl).max() < 1e-12
    assert ((ds.points >= -1e-12) & (ds.points <= 1 + 1e-12)).all()


def test_line_deterministic_and_rejects_d1():
    a = geom.sample_line_dataset(3, 10, 20, 0.01, seed=5)
    b = geom.sample_line_dataset(3, 10, 20, 0.01, seed=5)
    assert a.points.tobytes() == b.points.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    with pytest.raises(ValueError):
        geom.sample_line_dataset(1, 10, 10, 0.0)


@pytest.mark.parametrize("dim", [2, 4, 8])
def test_line_length_grows_linearly_with_extent(dim):
    lengths = []
    for extent in (1.0, 2.0):
        ds = geom.sample_line_dataset(dim, 5, 5, 0.0, extent=extent, seed=3)
        lo, hi = ds.params["segment"]
        lengths.append(hi - lo)
        assert hi - lo <= extent * np.sqrt(dim) + 1e-12
    assert lengths[1] == pytest.approx(2 * lengths[0])


def test_plane_noise_free_and_three_sigma_labels():
    ds = geom.sample_plane_dataset(5, 100, 100, 0.0, seed=2)
    pattern = geom.pattern_from_params(ds.params)
    assert pattern.distance(ds.points[ds.labels == 1]).max() < 1e-12
    noisy = geom.sample_plane_dataset(3, 2000, 0, 0.01, seed=2)
    d = geom.pattern_from_params(noisy.params).distance(noisy.points)
    assert np.mean(d <= 3 * 0.01) >= 0.99


def test_plane_in_2d_fills_domain():
    ds = geom.sample_plane_dataset(2, 50, 50, 0.0, seed=0)
    assert geom.pattern_from_params(ds.params).distance(ds.points).max() < 1e-12


def test_fit_line_examples(rng):
    pts = np.outer(np.linspace(-1, 2, 20), [-1.0, 2.0, 0.5]) + [3, 1, 0]
    d, c, mse = geom.fit_line_least_squares(pts)
    assert mse < 1e-25
    assert d[0] > 0
    noisy = pts + 0.05 * rng.standard_normal(pts.shape)
    d, c, mse = geom.fit_line_least_squares(noisy)
    rel = noisy - c
    brute = np.mean([r @ r - (r @ d) ** 2 for r in rel])
    assert mse == pytest.approx(brute, rel=1e-10)
    assert np.linalg.norm(d) == pytest.approx(1.0)


def test_fit_rejects_degenerate():
    with pytest.raises(ValueError):
        geom.fit_line_least_squares(np.ones((5, 3)))
    with pytest.raises(ValueError):
        geom.fit_line_least_squares(np.ones((1, 3)))


# Rigid correspondences

def test_identity_transform_inliers_coincide():
    ds = geom.make_3d_correspondences(300, 0.2, 0.0, RigidTransform.identity(), seed=0)
    inl = ds.points[ds.labels == 1]
    np.testing.assert_array_equal(inl[:, :3], inl[:, 3:])


def test_label_rule_threshold():
    T = RigidTransform(geom.axis_angle([0, 0, 1], 0.3), [0.1, 0.2, 0.3])
    tau = 0.1
    x = np.array([[0.5, -0.2, 0.1], [0.5, -0.2, 0.1]])
    step = np.array([[tau / 2, 0, 0], [2 * tau, 0, 0]])
    pairs = np.hstack([x, T.apply(x) + step])
    assert geom.label_rigid(pairs, T, tau).tolist() == [True, False]


@pytest.mark.parametrize("ratio", [0.05, 0.3])
def test_3d_inlier_ratio_close_to_request(ratio):
    ds = geom.make_3d_correspondences(10_000, ratio, 0.01, seed=4)
    assert abs(ds.inlier_ratio - ratio) <= 0.02
    T = RigidTransform.from_dict(ds.params["transform"])
    np.testing.assert_array_equal(ds.labels, geom.label_rigid(ds.points, T, ds.params["tau"]))


def test_rigid_plane_residual_and_rank():
    rng = np.random.default_rng(8)
    for _ in range(20):
        T = RigidTransform(geom.random_rotation(rng), rng.uniform(-2, 2, 3))
        x = rng.uniform(-1, 1, (50, 3))
        res = geom.rigid_plane_residual(x, T.apply(x), T)
        assert (np.linalg.norm(res, axis=1) <= 1e-12 * (1 + np.linalg.norm(x, axis=1))).all()
        assert np.linalg.matrix_rank(geom.hyperplane_block(T)) == 3
        m = np.hstack([x, T.apply(x)])
        s = np.linalg.svd(m - m.mean(axis=0), compute_uv=False)
        assert (s > 1e-9 * s[0]).sum() == 3


def test_generated_outliers_off_the_plane():
    ds = geom.make_3d_correspondences(2000, 0.1, 0.0, seed=1)
    T = RigidTransform.from_dict(ds.params["transform"])
    r = np.linalg.norm(geom.rigid_plane_residual(ds.points[:, :3], ds.points[:, 3:], T), axis=1)
    assert r[ds.labels == 1].max() <= 1e-12 * (1 + np.abs(ds.points).max())
    assert r[ds.labels == 0].min() >= ds.params["tau"]


def test_random_rotation_is_proper(rng):
    for _ in range(50):
        R = geom.random_rotation(rng)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0)
    R = geom.random_rotation(rng, max_angle=0.2)
    assert rotation_error(R, np.eye(3)) <= np.rad2deg(0.2) + 1e-9


def test_rigid_transform_validation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    T = RigidTransform(geom.axis_angle([1, 2, 3], 1.0), [1, 2, 3])
    x = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_allclose(T.inverse().apply(T.apply(x)), x, atol=1e-12)


# Epipolar geometry

def test_epipolar_inliers_exact():
    ds = geom.make_epipolar_correspondences(10_000, 0.3, seed=3)
    E = np.array(ds.params["E"])
    assert ds.labels[ds.constructed].all()
    inl = ds.points[ds.constructed]
    u = np.hstack([inl[:, :2], np.ones((len(inl), 1))])
    up = np.hstack([inl[:, 2:], np.ones((len(inl), 1))])
    assert np.abs(np.einsum("ij,jk,ik->i", up, E, u)).max() <= 1e-12
    s = np.linalg.svd(E, compute_uv=False)
    assert s[0] == pytest.approx(s[1], abs=1e-10) and s[2] <= 1e-10
    assert abs(ds.inlier_ratio - 0.3) <= 0.02
    assert ds.params["tau"] == 1e-4


def test_symmetric_distance_properties(rng):
    R = geom.axis_angle([0.2, 1, 0], 0.2)
    E = geom.essential_from_pose(R, [1.0, 0.1, 0.0])
    u = rng.uniform(-1, 1, (30, 2))
    up = rng.uniform(-1, 1, (30, 2))
    d = geom.symmetric_epipolar_distance(u, up, E)
    assert (d >= 0).all()
    np.testing.assert_allclose(geom.symmetric_epipolar_distance(up, u, E.T), d, rtol=1e-12)
    for a, b, dist in zip(u, up, d):
        ah, bh = np.r_[a, 1], np.r_[b, 1]
        ref = _point_line_distance_sq(b, E @ ah) + _point_line_distance_sq(a, E.T @ bh)
        assert dist == pytest.approx(ref, rel=1e-9)


def test_symmetric_distance_zero_residual():
    E = geom.essential_from_pose(np.eye(3), [1.0, 0.0, 0.0])
    # pure x-translation: epipolar lines are horizontal, same row means r = 0
    assert geom.symmetric_epipolar_distance([0.3, 0.2], [-0.5, 0.2], E) == 0.0


def test_essential_rejects_zero_translation():
    with pytest.raises(ValueError):
        geom.essential_from_pose(np.eye(3), np.zeros(3))


# Registration

def test_kabsch_identity_and_known_rotation(rng):
    x = rng.standard_normal((20, 3))
    T = geom.kabsch(x, x)
    np.testing.assert_allclose(T.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(T.t, 0, atol=1e-12)
    Rz = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    T = geom.kabsch(x, x @ Rz.T + [1, 0, 0])
    np.testing.assert_allclose(T.R, Rz, atol=1e-10)
    np.testing.assert_allclose(T.t, [1, 0, 0], atol=1e-10)


def test_kabsch_is_least_squares_optimum(rng):
    x = rng.standard_normal((30, 3))
    truth = RigidTransform(geom.random_rotation(rng), rng.standard_normal(3))
    y = truth.apply(x) + 0.05 * rng.standard_normal(x.shape)
    T = geom.kabsch(x, y)
    best = np.sum((T.apply(x) - y) ** 2)
    for _ in range(200):
        dR = geom.axis_angle(rng.standard_normal(3), rng.uniform(1e-4, 1e-2))
        cand = RigidTransform(dR @ T.R, T.t + rng.normal(0, 1e-3, 3))
        assert np.sum((cand.apply(x) - y) ** 2) >= best - 1e-12


def test_kabsch_rejects_collinear():
    x = np.outer(np.arange(5.0), [1, 1, 0])
    with pytest.raises(ValueError):
        geom.kabsch(x, x)


def test_ransac_all_inliers_single_iteration(rng):
    x = rng.standard_normal((40, 3))
    truth = RigidTransform(geom.random_rotation(rng), [0.5, -1, 2])
    res = geom.ransac_registration(x, truth.apply(x), iterations=1, inlier_tau=1e-6, seed=0)
    assert res.success and res.inliers.all()
    np.testing.assert_allclose(res.transform.R, truth.R, atol=1e-9)


def test_ransac_half_outliers_meets_bound():
    bound = geom.ransac_success_bound(0.5, 1000)
    assert bound >= 0.99
    rng = np.random.default_rng(12)
    successes = 0
    trials = 50
    for trial in range(trials):
        x = rng.uniform(-1, 1, (100, 3))
        truth = RigidTransform(geom.random_rotation(rng), rng.uniform(-1, 1, 3))
        y = truth.apply(x)
        y[50:] = rng.uniform(-2, 2, (50, 3))
        res = geom.ransac_registration(x, y, 1000, 0.05, seed=trial)
        successes += res.success and np.abs(res.transform.R - truth.R).max() < 1e-9
    assert successes / trials >= 0.99


def test_ransac_deterministic_and_failure(rng):
    x = rng.uniform(-1, 1, (60, 3))
    y = rng.uniform(-1, 1, (60, 3))
    a = geom.ransac_registration(x, y, 300, 0.05, seed=4)
    b = geom.ransac_registration(x, y, 300, 0.05, seed=4)
    assert a.best_hypothesis == b.best_hypothesis
    np.testing.assert_array_equal(a.inliers, b.inliers)
    assert not geom.ransac_registration(x[:2], y[:2]).success


@given(st.integers(0, 2**31))
def test_ransac_chunking_does_not_change_result(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (30, 3))
    truth = RigidTransform(geom.random_rotation(rng), np.zeros(3))
    y = truth.apply(x)
    y[10:] += rng.uniform(-1, 1, (20, 3))
    a = geom.ransac_registration(x, y, 100, 0.05, seed=seed, chunk=7)
    b = geom.ransac_registration(x, y, 100, 0.05, seed=seed, chunk=100)
    assert a.success == b.success
    np.testing.assert_array_equal(a.inliers, b.inliers)


# Dataset files

@pytest.mark.parametrize("fmt", ["binary", "csv"])
@pytest.mark.parametrize("maker", [
    lambda: geom.sample_line_dataset(3, 5, 10, 0.01, seed=1),
    lambda: geom.make_3d_correspondences(50, 0.2, 0.01, seed=2),
    lambda: geom.make_epipolar_correspondences(40, 0.5, seed=3),
])
def test_dataset_round_trip(tmp_path, fmt, maker):
    ds = maker()
    path = tmp_path / "d"
    geom.save_dataset(path, ds, fmt)
    back = geom.load_dataset(path)
    np.testing.assert_array_equal(back.points, ds.points)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.task == ds.task and back.params == ds.params


def test_load_dataset_rejects_garbage(tmp_path):
    p = tmp_path / "junk"
    p.write_text("hello\n")
    with pytest.raises(ValueError):
        geom.load_dataset(p)
