"""Kernel regions, convolution kernel maps and stride-K pooling maps."""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coords import CoordinateMap, SparseTensor


@dataclass(frozen=True)
class KernelRegion:
    offsets: np.ndarray  # M x D int64, zero offset first
    shape: str
    kernel_size: int

    @property
    def dim(self) -> int:
        return self.offsets.shape[1]

    def __len__(self) -> int:
        return len(self.offsets)

    @property
    def key(self) -> tuple:
        return (self.shape, self.kernel_size, self.dim)


def _check_size(dim: int, kernel_size: int) -> int:
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {kernel_size}")
    return (kernel_size - 1) // 2


def cross_offsets(dim: int, kernel_size: int) -> KernelRegion:
    """Zero offset plus the K-1 nearest neighbours along every axis."""
    r = _check_size(dim, kernel_size)
    offsets = [np.zeros(dim, dtype=np.int64)]
    steps = [m for m in range(-r, r + 1) if m != 0]
    for d in range(dim):
        for m in steps:
            o = np.zeros(dim, dtype=np.int64)
            o[d] = m
            offsets.append(o)
    return KernelRegion(np.array(offsets, dtype=np.int64), "cross", kernel_size)


def hypercubic_offsets(dim: int, kernel_size: int) -> KernelRegion:
    r = _check_size(dim, kernel_size)
    grid = np.array(list(itertools.product(range(-r, r + 1), repeat=dim)), dtype=np.int64)
    # Zero offset first so region[0] is always the centre.
    centre = int(np.flatnonzero(~grid.any(axis=1))[0])
    order = [centre] + [i for i in range(len(grid)) if i != centre]
    return KernelRegion(grid[order], "hypercubic", kernel_size)


def make_region(shape: str, dim: int, kernel_size: int) -> KernelRegion:
    if shape == "cross":
        return cross_offsets(dim, kernel_size)
    if shape == "hypercubic":
        return hypercubic_offsets(dim, kernel_size)
    raise ValueError(f"unknown kernel shape {shape!r}")


@dataclass
class KernelMap:
    """Per-offset (input row, output row) pairs, each list sorted by output row."""

    region: KernelRegion
    in_rows: list[np.ndarray]
    out_rows: list[np.ndarray]
    in_stride: np.ndarray
    n_in: int
    n_out: int
    identity: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.identity:
            self.identity = [
                len(i) == self.n_in == self.n_out
                and bool((i == np.arange(len(i))).all() and (o == i).all())
                for i, o in zip(self.in_rows, self.out_rows)]

    def __len__(self) -> int:
        return len(self.in_rows)

    def pairs(self, k: int) -> list[tuple[int, int]]:
        return list(zip(self.in_rows[k].tolist(), self.out_rows[k].tolist()))

    @property
    def num_pairs(self) -> int:
        return sum(len(r) for r in self.in_rows)


def _offset_shifts(region: KernelRegion, stride: np.ndarray, batched: bool) -> np.ndarray:
    shifts = region.offsets * stride[None, :]
    if batched:
        shifts = np.hstack([np.zeros((len(shifts), 1), dtype=np.int64), shifts])
    return np.ascontiguousarray(shifts)


def build_kernel_map(in_tensor: SparseTensor, out_map: CoordinateMap, region: KernelRegion,
                     workers: int = 1) -> KernelMap:
    """Record (row(c_out + o * stride_in), row(c_out)) for every offset o that hits."""
    in_map = in_tensor.coords_map
    if out_map.dim != in_map.dim or region.dim != in_tensor.dim:
        raise ValueError("dimension mismatch between input, output and kernel region")
    shifts = _offset_shifts(region, in_tensor.tensor_stride, in_tensor.batched)
    blocks = out_map.parallel_blocks(max(1, workers))

    def work(block):
        found = []
        for shift in shifts:
            rows = in_map.lookup_shifted(block.coords, shift)
            hit = rows >= 0
            found.append((rows[hit], block.rows[hit]))
        return found

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, blocks))
    else:
        results = [work(b) for b in blocks]

    in_rows, out_rows = [], []
    for k in range(len(shifts)):
        ins = np.concatenate([r[k][0] for r in results])
        outs = np.concatenate([r[k][1] for r in results])
        order = np.argsort(outs, kind="stable")
        in_rows.append(ins[order])
        out_rows.append(outs[order])
    return KernelMap(region, in_rows, out_rows, in_tensor.tensor_stride.copy(),
                     len(in_map), len(out_map))


@dataclass
class PoolMap:
    """Single-valued assignment of every input row to a coarser output cell."""

    out_map: CoordinateMap
    parents: np.ndarray
    in_stride: np.ndarray
    out_stride: np.ndarray
    kernel_size: int
    _segments: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def n_in(self) -> int:
        return len(self.parents)

    @property
    def n_out(self) -> int:
        return len(self.out_map)

    @property
    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        return np.arange(self.n_in), self.parents

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        """Input rows grouped by parent, and the start of each parent's group."""
        if self._segments is None:
            order = np.argsort(self.parents, kind="stable")
            starts = np.searchsorted(self.parents[order], np.arange(self.n_out))
            self._segments = (order, starts)
        return self._segments

    def child_counts(self) -> np.ndarray:
        return np.bincount(self.parents, minlength=self.n_out)


def pooled_coordinates(coords: np.ndarray, cell: np.ndarray, batched: bool = False) -> np.ndarray:
    """Round coordinates down to multiples of ``cell`` (batch column untouched)."""
    out = np.array(coords, dtype=np.int64, copy=True)
    spatial = out[:, 1:] if batched else out
    spatial //= cell
    spatial *= cell
    return out


def build_pool_map(in_tensor: SparseTensor, kernel_size: int) -> PoolMap:
    """Stride-K pooling map in one pass over the inputs."""
    if kernel_size < 2:
        raise ValueError("pooling stride must be >= 2")
    out_stride = in_tensor.tensor_stride * kernel_size
    coarse = pooled_coordinates(in_tensor.coordinates, out_stride, in_tensor.batched)
    out_map, parents = CoordinateMap.from_coordinates(coarse)
    return PoolMap(out_map, parents, in_tensor.tensor_stride.copy(), out_stride, kernel_size)


def format_kernel_map(kmap: KernelMap) -> str:
    """Text dump: one line per offset with its pair list."""
    lines = []
    for offset, ins, outs in zip(kmap.region.offsets, kmap.in_rows, kmap.out_rows):
        pairs = " ".join(f"{i}->{j}" for i, j in zip(ins.tolist(), outs.tolist()))
        lines.append(f"({','.join(str(int(v)) for v in offset)}): {pairs}".rstrip())
    return "\n".join(lines) + "\n"
