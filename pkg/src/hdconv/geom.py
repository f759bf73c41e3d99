"""Synthetic geometric datasets, labeling rules, fitting and registration."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

DEFAULT_EPIPOLAR_TAU = 1e-4


@dataclass
class Dataset:
    """A labeled point set together with the parameters that generated it."""

    points: np.ndarray
    labels: np.ndarray
    task: str
    params: dict = field(default_factory=dict)
    # Rows built to lie on the pattern (not serialised; labels are authoritative).
    constructed: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise ValueError("points must be an M x D array")
        self.labels = np.asarray(self.labels).astype(np.int64).reshape(-1)
        if len(self.labels) != len(self.points):
            raise ValueError("one label per point required")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def inlier_ratio(self) -> float:
        return float(self.labels.mean()) if len(self.labels) else 0.0

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class LinearPattern:
    basis: np.ndarray  # r x D, orthonormal rows
    offset: np.ndarray
    extent: float

    def __post_init__(self):
        gram = self.basis @ self.basis.T
        if not np.allclose(gram, np.eye(len(self.basis)), atol=1e-10):
            raise ValueError("basis must be orthonormal")

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Orthogonal distance of every point to the affine subspace."""
        d = np.asarray(points) - self.offset
        along = d @ self.basis.T @ self.basis
        return np.linalg.norm(d - along, axis=1)


@dataclass
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.linalg.norm(self.R.T @ self.R - np.eye(3)) > 1e-10 or np.linalg.det(self.R) <= 0:
            raise ValueError("R must be a proper rotation")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.R.T + self.t

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.array(d["R"]), np.array(d["t"]))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


def random_rotation(rng, max_angle: float | None = None) -> np.ndarray:
    """Uniform rotation on SO(3) from a random unit quaternion.

    With ``max_angle`` (radians) the rotation is about a uniform random axis
    with an angle drawn uniformly from [0, max_angle].
    """
    if max_angle is not None:
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        return axis_angle(axis, rng.uniform(0, max_angle))
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = skew(axis)
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# Linear subspaces.

def _box_interval(c: np.ndarray, v: np.ndarray, extent: float) -> tuple[float, float]:
    """Parameter range of {c + s v} inside [0, extent]^D (c inside the box)."""
    lo, hi = -np.inf, np.inf
    for ci, vi in zip(c, v):
        if abs(vi) < 1e-15:
            continue
        a, b = (0 - ci) / vi, (extent - ci) / vi
        lo, hi = max(lo, min(a, b)), min(hi, max(a, b))
    return lo, hi


def _finish(rng, inliers, outliers, task, params) -> Dataset:
    points = np.vstack([inliers, outliers]) if len(outliers) else inliers
    labels = np.r_[np.ones(len(inliers), np.int64), np.zeros(len(outliers), np.int64)]
    order = rng.permutation(len(points))
    return Dataset(points[order], labels[order], task, params, labels[order].astype(bool))


def sample_line_dataset(dim: int, n_inlier: int, n_outlier: int, sigma: float,
                        extent: float = 1.0, seed: int = 0,
                        min_length: float | None = None) -> Dataset:
    """Noisy samples from a random line in [0, extent]^D plus uniform outliers.

    The line passes through a uniform point of the domain with a direction
    uniform on the sphere; inliers are uniform along the clipped segment with
    isotropic Gaussian noise.  Segments shorter than ``min_length`` (default
    extent / 2) are resampled.
    """
    if dim < 2:
        raise ValueError("line datasets need D >= 2")
    if n_inlier < 0 or n_outlier < 0 or sigma < 0 or extent <= 0:
        raise ValueError("counts and sigma must be non-negative, extent positive")
    rng = np.random.default_rng(seed)
    min_length = extent / 2 if min_length is None else min_length
    while True:
        c = rng.uniform(0, extent, dim)
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        lo, hi = _box_interval(c, v, extent)
        if hi - lo >= min_length:
            break
    s = rng.uniform(lo, hi, n_inlier)
    inliers = c + s[:, None] * v + sigma * rng.standard_normal((n_inlier, dim))
    outliers = rng.uniform(0, extent, (n_outlier, dim))
    if v[np.flatnonzero(np.abs(v) > 0)[0]] < 0:
        v = -v
    params = {"basis": [v.tolist()], "offset": c.tolist(), "extent": extent, "sigma": sigma,
              "segment": [float(lo), float(hi)]}
    return _finish(rng, inliers, outliers, "line", params)


def sample_plane_dataset(dim: int, n_inlier: int, n_outlier: int, sigma: float,
                         extent: float = 1.0, seed: int = 0) -> Dataset:
    """Noisy samples from a random 2-flat in [0, extent]^D plus uniform outliers.

    Both spanning vectors are drawn from the unit hypercube and then
    orthonormalised (Gram-Schmidt).
    """
    if dim < 2:
        raise ValueError("plane datasets need D >= 2")
    if n_inlier < 0 or n_outlier < 0 or sigma < 0 or extent <= 0:
        raise ValueError("counts and sigma must be non-negative, extent positive")
    rng = np.random.default_rng(seed)
    while True:
        raw = rng.uniform(0, 1, (2, dim))
        q, r = np.linalg.qr(raw.T)
        if abs(r[1, 1]) > 1e-3 * abs(r[0, 0]):
            break
    basis = (q[:, :2] * np.sign(np.diag(r))[None, :]).T
    c = rng.uniform(0, extent, dim)
    reach = extent * np.sqrt(dim)
    samples = np.empty((0, dim))
    while len(samples) < n_inlier:
        coef = rng.uniform(-reach, reach, (max(4 * n_inlier, 64), 2))
        cand = c + coef @ basis
        inside = ((cand >= 0) & (cand <= extent)).all(axis=1)
        samples = np.vstack([samples, cand[inside]])
    inliers = samples[:n_inlier] + sigma * rng.standard_normal((n_inlier, dim))
    outliers = rng.uniform(0, extent, (n_outlier, dim))
    params = {"basis": basis.tolist(), "offset": c.tolist(), "extent": extent, "sigma": sigma}
    return _finish(rng, inliers, outliers, "plane", params)


def pattern_from_params(params: dict) -> LinearPattern:
    return LinearPattern(np.array(params["basis"]), np.array(params["offset"]),
                         float(params["extent"]))


def fit_subspace_least_squares(points, rank: int = 1):
    """Unweighted least-squares affine subspace through the points.

    Returns (basis r x D, centroid, mse) where mse is the mean squared
    orthogonal distance to the fitted subspace.  Basis rows are sign-fixed so
    their first nonzero component is positive.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) < rank + 1:
        raise ValueError(f"need at least {rank + 1} points")
    centroid = points.mean(axis=0)
    centred = points - centroid
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    if s[0] <= 1e-12 * max(1.0, np.abs(points).max()):
        raise ValueError("degenerate input: all points coincide")
    basis = vt[:rank].copy()
    for row in basis:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if len(nz) and row[nz[0]] < 0:
            row *= -1
    resid = centred - centred @ basis.T @ basis
    mse = float((resid**2).sum(axis=1).mean())
    return basis, centroid, mse


def fit_line_least_squares(points):
    basis, centroid, mse = fit_subspace_least_squares(points, 1)
    return basis[0], centroid, mse


# Rigid correspondences (6D).

def rigid_plane_residual(x, x_prime, transform: RigidTransform) -> np.ndarray:
    """[R  -I] (x; x') + t for one pair or an M x 3 batch of pairs."""
    x = np.asarray(x, dtype=np.float64)
    x_prime = np.asarray(x_prime, dtype=np.float64)
    return x @ transform.R.T - x_prime + transform.t


def hyperplane_block(transform: RigidTransform) -> np.ndarray:
    return np.hstack([transform.R, -np.eye(3)])


def _surface_points(rng, n: int, extent: float) -> np.ndarray:
    """Points on a random smooth height field over [0, extent]^2."""
    uv = rng.uniform(0, extent, (n, 2))
    freq = rng.uniform(0.5, 1.5, (3, 2)) * 2 * np.pi / extent
    phase = rng.uniform(0, 2 * np.pi, 3)
    amp = rng.uniform(0.05, 0.15, 3) * extent
    h = (amp * np.sin(uv @ freq.T + phase)).sum(axis=1)
    pts = np.column_stack([uv, h])
    pts -= pts.mean(axis=0)
    # Random orientation of the scene itself.
    return pts @ random_rotation(rng).T


def make_3d_correspondences(n_points: int, inlier_ratio: float, noise: float = 0.0,
                            transform: RigidTransform | None = None, seed: int = 0,
                            voxel_size: float = 0.05, extent: float = 1.0,
                            scene: str = "surface", inlier_regions: int = 3) -> Dataset:
    """Putative 3D correspondences (x, x') in R^6 under a rigid motion.

    Scene points x are spread uniformly over a random surface (or volume).
    Inlier rows are (x, R x + t + noise).  With ``inlier_regions > 0`` the
    inliers are the points closest to that many random seed points, the way
    descriptor matches succeed in distinctive parts of a scan; with 0 they are
    a uniform random subset.  Outlier rows pair x with the image of another
    scene point at least tau away.  Labels are recomputed afterwards with
    ``|T(x) - x'| < tau``, ``tau = 2 * voxel_size``.
    """
    if not 0 < inlier_ratio <= 1:
        raise ValueError("inlier_ratio must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    if transform is None:
        transform = RigidTransform(random_rotation(rng), rng.uniform(-extent, extent, 3))
    if scene == "surface":
        x = _surface_points(rng, n_points, extent)
    elif scene == "volume":
        x = rng.uniform(-extent / 2, extent / 2, (n_points, 3))
    else:
        raise ValueError(f"unknown scene type {scene!r}")
    tau = 2 * voxel_size
    n_in = int(round(n_points * inlier_ratio))
    is_in = np.zeros(n_points, dtype=bool)
    if inlier_regions > 0 and n_in:
        seeds = rng.choice(n_points, size=min(inlier_regions, n_in), replace=False)
        quota = np.full(len(seeds), n_in // len(seeds))
        quota[: n_in % len(seeds)] += 1
        for s, q in zip(seeds, quota):
            dist = np.linalg.norm(x - x[s], axis=1)
            dist[is_in] = np.inf
            is_in[np.argsort(dist, kind="stable")[:q]] = True
    else:
        is_in[rng.choice(n_points, size=n_in, replace=False)] = True
    target = transform.apply(x)
    x_prime = target + noise * rng.standard_normal(target.shape)
    out_idx = np.flatnonzero(~is_in)
    partner = rng.integers(0, n_points, len(out_idx))
    for _ in range(100):
        close = np.linalg.norm(x[partner] - x[out_idx], axis=1) < tau + 4 * noise
        if not close.any():
            break
        partner[close] = rng.integers(0, n_points, int(close.sum()))
    x_prime[out_idx] = target[partner] + noise * rng.standard_normal((len(out_idx), 3))
    labels = np.linalg.norm(rigid_plane_residual(x, x_prime, transform), axis=1) < tau
    order = rng.permutation(n_points)
    params = {"transform": transform.to_dict(), "voxel_size": voxel_size, "tau": tau,
              "noise": noise, "requested_inlier_ratio": inlier_ratio}
    return Dataset(np.hstack([x, x_prime])[order], labels[order], "reg3d", params, is_in[order])


def label_rigid(pairs: np.ndarray, transform: RigidTransform, tau: float) -> np.ndarray:
    pairs = np.asarray(pairs)
    return np.linalg.norm(rigid_plane_residual(pairs[:, :3], pairs[:, 3:], transform), axis=1) < tau


# Epipolar correspondences (4D).

def essential_from_pose(R, t) -> np.ndarray:
    """E = [t]_x R scaled to Frobenius norm sqrt(2)."""
    t = np.asarray(t, dtype=np.float64)
    if np.linalg.norm(t) < 1e-9:
        raise ValueError("pure rotation: translation must be nonzero")
    E = skew(t) @ np.asarray(R)
    return E * np.sqrt(2) / np.linalg.norm(E)


def _homogeneous(u) -> np.ndarray:
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    if u.shape[1] == 2:
        u = np.hstack([u, np.ones((len(u), 1))])
    return u


def symmetric_epipolar_distance(u, u_prime, E) -> np.ndarray:
    """r^2/(l1^2 + l2^2) + r^2/(l'1^2 + l'2^2) with r = u'^T E u.

    ``l = u'^T E`` and ``l' = E u``.  Accepts single points or M-row batches
    of 2D or homogeneous coordinates.  Degenerate lines give +inf.
    """
    scalar = np.ndim(u) == 1
    u, up = _homogeneous(u), _homogeneous(u_prime)
    E = np.asarray(E, dtype=np.float64)
    l = up @ E
    lp = u @ E.T
    r = np.einsum("ij,ij->i", l, u)
    r2 = r * r
    n1 = l[:, 0] ** 2 + l[:, 1] ** 2
    n2 = lp[:, 0] ** 2 + lp[:, 1] ** 2
    tiny = 1e-300
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(n1 > tiny, r2 / np.where(n1 > tiny, n1, 1), np.where(r2 > 0, np.inf, 0.0))
        t2 = np.where(n2 > tiny, r2 / np.where(n2 > tiny, n2, 1), np.where(r2 > 0, np.inf, 0.0))
    d = t1 + t2
    d[(n1 <= tiny) & (n2 <= tiny)] = np.inf
    return d[0] if scalar else d


def make_epipolar_correspondences(n: int, inlier_ratio: float,
                                  transform: RigidTransform | None = None, seed: int = 0,
                                  tau: float = DEFAULT_EPIPOLAR_TAU, fov: float = 1.0,
                                  depth: tuple[float, float] = (2.0, 8.0)) -> Dataset:
    """Two-view correspondences (u, u') in normalised image coordinates.

    Inliers are projections of random 3D points into camera 1 (identity pose)
    and camera 2 (x2 = R x1 + t); outliers pair independent uniform image
    points.  All image coordinates lie in [-fov, fov]^2.  Labels use the
    symmetric epipolar distance against ``tau``.
    """
    if not 0 < inlier_ratio <= 1:
        raise ValueError("inlier_ratio must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    if transform is None:
        direction = rng.standard_normal(3)
        transform = RigidTransform(random_rotation(rng, max_angle=np.deg2rad(15)),
                                   direction / np.linalg.norm(direction))
    if np.linalg.norm(transform.t) < 1e-9:
        raise ValueError("degenerate geometry: translation is zero")
    E = essential_from_pose(transform.R, transform.t)
    n_in = int(round(n * inlier_ratio))
    u = np.empty((0, 2))
    up = np.empty((0, 2))
    for _ in range(1000):
        if len(u) >= n_in:
            break
        m = max(2 * (n_in - len(u)), 16)
        z = rng.uniform(*depth, m)
        X = np.column_stack([rng.uniform(-fov, fov, (m, 2)) * z[:, None], z])
        X2 = transform.apply(X)
        ok = X2[:, 2] > 1e-3
        p1 = X[ok, :2] / X[ok, 2:]
        p2 = X2[ok, :2] / X2[ok, 2:]
        visible = (np.abs(p2) <= fov).all(axis=1)
        u = np.vstack([u, p1[visible]])
        up = np.vstack([up, p2[visible]])
    if len(u) < n_in:
        raise ValueError("degenerate geometry: too few points visible in both views")
    u, up = u[:n_in], up[:n_in]
    outliers = rng.uniform(-fov, fov, (n - n_in, 4))
    pairs = np.vstack([np.hstack([u, up]), outliers])
    labels = symmetric_epipolar_distance(pairs[:, :2], pairs[:, 2:], E) < tau
    built = np.arange(n) < n_in
    order = rng.permutation(n)
    params = {"transform": transform.to_dict(), "E": E.tolist(), "tau": tau,
              "requested_inlier_ratio": inlier_ratio}
    return Dataset(pairs[order], labels[order], "epipolar", params, built[order])


# Registration.

def kabsch(src, dst) -> RigidTransform:
    """Least-squares rigid transform mapping src onto dst (reflection corrected)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("kabsch expects two M x 3 arrays")
    if len(src) < 3:
        raise ValueError("kabsch needs at least 3 pairs")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - cs, dst - cd
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise ValueError("degenerate configuration: points are collinear")
    R = _kabsch_rotation(a.T @ b)
    return RigidTransform(R, cd - R @ cs)


def _kabsch_rotation(H: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(H)
    V = Vt.T.copy()
    if np.linalg.det(V @ U.T) < 0:
        V[:, 2] *= -1
    R = V @ U.T
    # Re-orthonormalise away SVD roundoff so RigidTransform validation passes.
    U2, _, Vt2 = np.linalg.svd(R)
    return U2 @ Vt2


@dataclass
class RansacResult:
    transform: RigidTransform | None
    inliers: np.ndarray
    best_hypothesis: int

    @property
    def success(self) -> bool:
        return self.transform is not None


def ransac_registration(src, dst, iterations: int = 1000, inlier_tau: float = 0.1,
                        seed: int = 0, chunk: int = 256) -> RansacResult:
    """3-point RANSAC with Kabsch hypotheses and a consensus refit.

    The best hypothesis maximises the consensus count; ties go to the lowest
    hypothesis index.  Fewer than 3 supporting pairs yields a failed result.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    fail = RansacResult(None, np.zeros(n, dtype=bool), -1)
    if n < 3:
        return fail
    rng = np.random.default_rng(seed)
    best_count, best_idx, best_rt = -1, -1, None
    done = 0
    while done < iterations:
        m = min(chunk, iterations - done)
        idx = np.argsort(rng.random((m, n)), axis=1)[:, :3] if n > 3 else \
            np.tile(np.arange(3), (m, 1))
        a, b = src[idx], dst[idx]
        ca, cb = a.mean(axis=1, keepdims=True), b.mean(axis=1, keepdims=True)
        a0, b0 = a - ca, b - cb
        H = np.swapaxes(a0, 1, 2) @ b0
        U, S, Vt = np.linalg.svd(H)
        V = np.swapaxes(Vt, 1, 2).copy()
        d = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
        V[:, :, 2] *= np.where(d == 0, 1.0, d)[:, None]
        R = V @ np.swapaxes(U, 1, 2)
        t = cb[:, 0] - np.einsum("mij,mj->mi", R, ca[:, 0])
        # Collinear minimal samples carry no rotation information.
        spread = np.linalg.svd(a0, compute_uv=False)
        valid = spread[:, 1] > 1e-9 * np.maximum(spread[:, 0], 1e-300)
        resid = np.einsum("mij,nj->mni", R, src) + t[:, None, :] - dst[None]
        counts = (np.linalg.norm(resid, axis=2) < inlier_tau).sum(axis=1)
        counts[~valid] = -1
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_idx, best_rt = int(counts[k]), done + k, (R[k], t[k])
        done += m
    if best_count < 3:
        return fail
    R0, t0 = best_rt
    mask = np.linalg.norm(src @ R0.T + t0 - dst, axis=1) < inlier_tau
    try:
        refit = kabsch(src[mask], dst[mask])
    except ValueError:
        return fail
    final = np.linalg.norm(refit.apply(src) - dst, axis=1) < inlier_tau
    return RansacResult(refit, final, best_idx)


def ransac_success_bound(inlier_fraction: float, iterations: int, sample_size: int = 3) -> float:
    """1 - (1 - w^s)^N: probability that at least one minimal sample is clean."""
    return 1.0 - (1.0 - inlier_fraction**sample_size) ** iterations


# Dataset files.
#
# Binary layout (little-endian):
#   magic       4 bytes b"HDDS"
#   version     uint32  1
#   D           uint32  point columns
#   M           uint64  rows
#   tag_len     uint16, then the task tag (UTF-8)
#   params_len  uint32, then ground-truth parameters as UTF-8 JSON
#   rows        M x (D x float64, uint8 label)
#
# CSV form: one header comment line
#   "# D=<D> M=<M> task=<tag> params=<json>"
# then M lines of D floats and the integer label.

_DS_MAGIC = b"HDDS"
_DS_VERSION = 1


def _ds_dtype(d: int) -> np.dtype:
    return np.dtype([("p", "<f8", (d,)), ("label", "u1")])


def save_dataset(path, ds: Dataset, fmt: str = "binary") -> None:
    params = json.dumps(ds.params, sort_keys=True)
    if fmt == "binary":
        rows = np.empty(len(ds), dtype=_ds_dtype(ds.dim))
        rows["p"] = ds.points
        rows["label"] = ds.labels
        tag = ds.task.encode()
        pbytes = params.encode()
        with open(path, "wb") as fh:
            fh.write(_DS_MAGIC)
            fh.write(struct.pack("<IIQ", _DS_VERSION, ds.dim, len(ds)))
            fh.write(struct.pack("<H", len(tag)) + tag)
            fh.write(struct.pack("<I", len(pbytes)) + pbytes)
            fh.write(rows.tobytes())
    elif fmt == "csv":
        with open(path, "w") as fh:
            fh.write(f"# D={ds.dim} M={len(ds)} task={ds.task} params={params}\n")
            for p, y in zip(ds.points, ds.labels):
                fh.write(",".join([repr(float(v)) for v in p] + [str(int(y))]) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == _DS_MAGIC:
            version, d, m = struct.unpack("<IIQ", fh.read(16))
            if version != _DS_VERSION:
                raise ValueError(f"unsupported dataset version {version}")
            (tlen,) = struct.unpack("<H", fh.read(2))
            task = fh.read(tlen).decode()
            (plen,) = struct.unpack("<I", fh.read(4))
            params = json.loads(fh.read(plen).decode())
            rows = np.frombuffer(fh.read(), dtype=_ds_dtype(d), count=m)
            return Dataset(rows["p"].astype(np.float64), rows["label"], task, params)
        fh.seek(0)
        lines = fh.read().decode().splitlines()
    if not lines or not lines[0].startswith("# D="):
        raise ValueError(f"{path} is not a dataset file")
    head, _, params = lines[0][2:].partition(" params=")
    meta = dict(item.split("=", 1) for item in head.split())
    d, m = int(meta["D"]), int(meta["M"])
    table = np.loadtxt(lines[1:], delimiter=",", ndmin=2) if m else np.zeros((0, d + 1))
    return Dataset(table[:, :d], table[:, d].astype(np.int64), meta["task"], json.loads(params))
