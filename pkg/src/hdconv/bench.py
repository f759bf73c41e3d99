"""Timing and operation-count benchmarks for pooling and kernel maps."""

from __future__ import annotations

import time

import numpy as np

from . import layers
from .coords import CoordinateMap, SparseTensor
from .kernel import build_kernel_map, build_pool_map, make_region


def random_tensor(n: int, dim: int, seed: int = 0, span: int = 1 << 20,
                  channels: int = 1) -> SparseTensor:
    """n distinct random integer coordinates in [0, span)^dim."""
    rng = np.random.default_rng(seed)
    coords = rng.integers(0, span, (n, dim))
    cmap, _ = CoordinateMap.from_coordinates(coords)
    while len(cmap) < n:
        cmap.insert_many(rng.integers(0, span, (n - len(cmap), dim)))
    feats = rng.standard_normal((len(cmap), channels))
    return SparseTensor(cmap, feats)


def best_time(fn, repeats: int = 3) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def pooling_scaling(sizes=(10_000, 100_000, 1_000_000), dim: int = 8, kernel_size: int = 2,
                    seed: int = 0, repeats: int = 3) -> list[dict]:
    """time(2N) / time(N) of building a stride-K pooling map at each N."""
    build_pool_map(random_tensor(64, dim, seed), kernel_size)  # warm the JIT
    rows = []
    for n in sizes:
        t_n, t_2n = (best_time(lambda t=random_tensor(m, dim, seed): build_pool_map(t, kernel_size),
                               repeats) for m in (n, 2 * n))
        rows.append({"bench": "pool_scaling", "dim": dim, "n": int(n), "time_n_s": t_n,
                     "time_2n_s": t_2n, "ratio": t_2n / t_n})
    return rows


def kernel_map_times(sizes=(1_000, 10_000), dims=(2, 4, 6), kernel_size: int = 3,
                     workers: int = 1, seed: int = 0, repeats: int = 3) -> list[dict]:
    rows = []
    for dim in dims:
        for shape in ("cross", "hypercubic"):
            region = make_region(shape, dim, kernel_size)
            for n in sizes:
                t = random_tensor(n, dim, seed, span=max(4, int(round(n ** (1 / dim) * 2))))
                build_kernel_map(t, t.coords_map, region, workers)
                secs = best_time(lambda: build_kernel_map(t, t.coords_map, region, workers),
                                 repeats)
                rows.append({"bench": "kernel_map", "dim": dim, "shape": shape, "n": int(n),
                             "offsets": len(region), "workers": workers, "time_s": secs})
    return rows


def matmul_counts(dim: int = 6, kernel_size: int = 3, seed: int = 0) -> dict[str, int]:
    """Per-offset matrix products actually issued by one convolution of each shape."""
    t = random_tensor(16, dim, seed, span=3)
    out = {}
    for shape in ("cross", "hypercubic"):
        region = make_region(shape, dim, kernel_size)
        kmap = build_kernel_map(t, t.coords_map, region)
        w = np.zeros((len(region), 1, 1))
        before = layers.counters["conv_matmul"]
        layers.conv_forward(t.features, w, np.zeros(1), kmap)
        out[shape] = layers.counters["conv_matmul"] - before
    return out


def run(quick: bool = False, workers: int = 1, seed: int = 0) -> list[dict]:
    sizes = (10_000, 100_000) if quick else (10_000, 100_000, 1_000_000)
    rows = pooling_scaling(sizes, seed=seed)
    rows += kernel_map_times((1_000,) if quick else (1_000, 10_000), workers=workers, seed=seed)
    counts = matmul_counts(seed=seed)
    rows += [{"bench": "matmul_count", "dim": 6, "kernel_size": 3, "shape": k, "count": v}
             for k, v in counts.items()]
    return rows
