"""Central finite-difference checks of every layer and of whole networks (float64)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .coords import SparseTensor, quantize
from .kernel import build_kernel_map, build_pool_map, make_region
from .layers import BatchNormParams
from .models import NetworkConfig, Pyramid, build_mlp_baseline, build_unet

STEP = 1e-5
LAYER_TOL = 1e-5
NETWORK_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    instances: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), zero when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-12:
        return float(np.linalg.norm(a - b))
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, idx=None, h: float = STEP):
    """Central differences of f with respect to arr (modified in place and restored)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def check_values(build: Callable[[], ad.Value], leaves: list[ad.Value], subset: int | None = None,
                 rng=None) -> float:
    """Compare tape gradients of a scalar graph against finite differences."""
    for v in leaves:
        v.grad = None
    ad.backward(build())
    worst = 0.0

    def f():
        return float(build().data)

    analytic, numeric = [], []
    for v in leaves:
        g = v.grad if v.grad is not None else np.zeros_like(v.data)
        idx = None
        if subset is not None and v.data.size > subset:
            idx = np.sort(rng.choice(v.data.size, subset, replace=False))
        analytic.append(g.reshape(-1) if idx is None else g.reshape(-1)[idx])
        numeric.append(numeric_grad(f, v.data, idx))
    worst = rel_error(np.concatenate(analytic), np.concatenate(numeric))
    return worst


def _projected(out: ad.Value, proj: np.ndarray) -> ad.Value:
    return (out * ad.Value(proj)).sum()


def _random_tensor(rng, dim: int, n: int, channels: int, span: int = 4) -> SparseTensor:
    coords = rng.integers(0, span, (n, dim))
    tensor, _ = quantize(coords + 0.5, 1.0, rng.standard_normal((n, channels)))
    return tensor


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.5, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _case_conv(shape):
    def case(rng):
        dim = int(rng.integers(1, 4))
        t = _random_tensor(rng, dim, int(rng.integers(3, 12)), int(rng.integers(1, 4)))
        region = make_region(shape, dim, 3)
        kmap = build_kernel_map(t, t.coords_map, region)
        c_out = int(rng.integers(1, 4))
        x = ad.parameter(t.features.copy())
        w = ad.parameter(rng.standard_normal((len(region), t.num_channels, c_out)))
        b = ad.parameter(rng.standard_normal(c_out))
        proj = rng.standard_normal((len(t), c_out))
        return (lambda: _projected(ad.conv(x, w, b, kmap), proj)), [x, w, b]
    return case


def _case_pool(unpool: bool):
    def case(rng):
        dim = int(rng.integers(1, 4))
        t = _random_tensor(rng, dim, int(rng.integers(3, 15)), 2, span=6)
        pmap = build_pool_map(t, int(rng.integers(2, 4)))
        if unpool:
            x = ad.parameter(rng.standard_normal((pmap.n_out, 2)))
            proj = rng.standard_normal((pmap.n_in, 2))
            return (lambda: _projected(ad.sum_unpool(x, pmap), proj)), [x]
        x = ad.parameter(t.features.copy())
        proj = rng.standard_normal((pmap.n_out, 2))
        return (lambda: _projected(ad.sum_pool(x, pmap), proj)), [x]
    return case


def _case_batch_norm(rng):
    n, c = int(rng.integers(3, 12)), int(rng.integers(1, 4))
    x = ad.parameter(rng.standard_normal((n, c)) * rng.uniform(0.5, 3))
    gamma = ad.parameter(rng.uniform(0.5, 2, c))
    beta = ad.parameter(rng.standard_normal(c))
    state = BatchNormParams.init(c)
    proj = rng.standard_normal((n, c))
    return (lambda: _projected(ad.batch_norm(x, gamma, beta, state, True), proj)), [x, gamma, beta]


def _case_instance_norm(rng):
    n, c = int(rng.integers(4, 12)), int(rng.integers(1, 4))
    groups = np.sort(rng.integers(0, 2, n))
    groups[0], groups[-1] = 0, 1
    x = ad.parameter(rng.standard_normal((n, c)))
    proj = rng.standard_normal((n, c))
    return (lambda: _projected(ad.instance_norm(x, groups), proj)), [x]


def _case_relu(rng):
    x = ad.parameter(_away_from_zero(rng, (int(rng.integers(2, 10)), 3)))
    proj = rng.standard_normal(x.shape)
    return (lambda: _projected(ad.relu(x), proj)), [x]


def _case_residual(rng):
    a = ad.parameter(rng.standard_normal((6, 3)))
    b = ad.parameter(rng.standard_normal((6, 3)))
    proj = rng.standard_normal((6, 3))
    return (lambda: _projected(a + b, proj)), [a, b]


def _case_global_pool(rng):
    n = int(rng.integers(1, 10))
    x = ad.parameter(rng.standard_normal((n, 3)))
    proj = rng.standard_normal((1, 3))
    return (lambda: _projected(ad.global_avg_pool(x), proj)), [x]


def _case_linear(rng):
    x = ad.parameter(rng.standard_normal((5, 3)))
    w = ad.parameter(rng.standard_normal((3, 2)))
    b = ad.parameter(rng.standard_normal(2))
    proj = rng.standard_normal((5, 2))
    return (lambda: _projected(ad.linear(x, w, b), proj)), [x, w, b]


def _case_loss(balanced: bool):
    def case(rng):
        n = int(rng.integers(2, 12))
        z = ad.parameter(rng.standard_normal((n, 1)) * 3)
        y = rng.integers(0, 2, n)
        fn = ad.balanced_cross_entropy if balanced else ad.cross_entropy
        return (lambda: fn(z, y)), [z]
    return case


LAYER_CASES = {
    "conv_cross": _case_conv("cross"),
    "conv_hypercubic": _case_conv("hypercubic"),
    "sum_pool": _case_pool(False),
    "sum_unpool": _case_pool(True),
    "batch_norm": _case_batch_norm,
    "instance_norm": _case_instance_norm,
    "relu": _case_relu,
    "residual_add": _case_residual,
    "global_avg_pool": _case_global_pool,
    "linear": _case_linear,
    "cross_entropy": _case_loss(False),
    "balanced_cross_entropy": _case_loss(True),
}


def check_layer(name: str, instances: int = 20, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        build, leaves = LAYER_CASES[name](rng)
        worst = max(worst, check_values(build, leaves))
    return CheckResult(name, worst, instances, LAYER_TOL)


def tiny_instance(rng, dim: int = 2, n_points: int = 30):
    """A small random point set quantized onto a coarse grid."""
    pts = rng.uniform(0, 1, (n_points, dim))
    feats = np.hstack([np.ones((n_points, 1)), pts - pts.mean(axis=0)])
    tensor, prov = quantize(pts, 0.15, feats)
    labels = rng.integers(0, 2, len(tensor))
    labels[0], labels[-1] = 0, 1
    return tensor, labels


def check_network(kind: str, seed: int = 0, subset: int = 40, instances: int = 1) -> CheckResult:
    """Loss gradient of a tiny float64 network vs. finite differences.

    Every parameter tensor is checked on up to ``subset`` random entries.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        cfg = NetworkConfig(dim=2, kernel_shape="cross", kernel_size=3, levels=2,
                            channels=(4, 6), blocks=1, in_channels=3, mlp_blocks=1)
        tensor, labels = tiny_instance(rng)
        if kind == "unet":
            net = build_unet(cfg, int(rng.integers(1 << 30)), np.float64)
            pyr = Pyramid.build(tensor, cfg)
        else:
            net = build_mlp_baseline(
                NetworkConfig(dim=2, levels=1, channels=(6,), in_channels=3, mlp_blocks=1),
                int(rng.integers(1 << 30)), np.float64)
            pyr = None

        def build():
            return ad.balanced_cross_entropy(net(tensor, pyr, training=True), labels)

        worst = max(worst, check_values(build, net.parameters(), subset, rng))
    return CheckResult(f"network_{kind}", worst, instances, NETWORK_TOL)


def run_all(instances: int = 20, seed: int = 0) -> list[CheckResult]:
    results = [check_layer(name, instances, seed + i) for i, name in enumerate(LAYER_CASES)]
    results.append(check_network("unet", seed))
    results.append(check_network("mlp", seed))
    return results
