"""Grid quantization, the coordinate hash map and the sparse tensor container.

The coordinate map is a Robin Hood open-addressing table keyed on integer
D-vectors.  Parameters (fixed for determinism):

* capacity is a power of two, grown by doubling so the load factor never
  exceeds 1/2;
* linear probing; on collision the entry that is closer to its home slot
  yields its slot to the one that has travelled further;
* the hash folds components left to right with a multiply-xorshift mix
  (constants from splitmix64).

Row indices are assigned densely in first-insertion order, so the map is a
bijection between stored coordinates and ``0..N-1``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional

import numba
import numpy as np

_EMPTY = -1
_MAX_LOAD = 0.5

_SEED = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)


@numba.njit(cache=True, nogil=True)
def _hash_row(key):
    h = _SEED
    for c in key:
        h ^= np.uint64(c) + _SEED
        h ^= h >> np.uint64(30)
        h *= _MUL1
        h ^= h >> np.uint64(27)
        h *= _MUL2
        h ^= h >> np.uint64(31)
    return h


@numba.njit(cache=True, nogil=True)
def _keys_equal(table_keys, slot, key):
    for d in range(key.shape[0]):
        if table_keys[slot, d] != key[d]:
            return False
    return True


@numba.njit(cache=True, nogil=True)
def _find(table_keys, table_vals, table_dist, key):
    mask = table_vals.shape[0] - 1
    slot = np.int64(_hash_row(key) & np.uint64(mask))
    dist = 0
    while table_vals[slot] != _EMPTY and table_dist[slot] >= dist:
        if _keys_equal(table_keys, slot, key):
            return table_vals[slot]
        slot = (slot + 1) & mask
        dist += 1
    return -1


@numba.njit(cache=True, nogil=True)
def _place(table_keys, table_vals, table_dist, key, value):
    """Robin Hood insertion of a key known to be absent."""
    mask = table_vals.shape[0] - 1
    cur_key = key.copy()
    cur_val = value
    cur_dist = 0
    slot = np.int64(_hash_row(cur_key) & np.uint64(mask))
    while True:
        if table_vals[slot] == _EMPTY:
            table_keys[slot, :] = cur_key
            table_vals[slot] = cur_val
            table_dist[slot] = cur_dist
            return
        if table_dist[slot] < cur_dist:
            for d in range(cur_key.shape[0]):
                tmp = table_keys[slot, d]
                table_keys[slot, d] = cur_key[d]
                cur_key[d] = tmp
            tmp_val = table_vals[slot]
            table_vals[slot] = cur_val
            cur_val = tmp_val
            tmp_dist = table_dist[slot]
            table_dist[slot] = cur_dist
            cur_dist = tmp_dist
        slot = (slot + 1) & mask
        cur_dist += 1


@numba.njit(cache=True, nogil=True)
def _insert_many(table_keys, table_vals, table_dist, coord_buf, n, queries, out_rows):
    for q in range(queries.shape[0]):
        key = queries[q]
        row = _find(table_keys, table_vals, table_dist, key)
        if row < 0:
            row = n
            _place(table_keys, table_vals, table_dist, key, row)
            coord_buf[row, :] = key
            n += 1
        out_rows[q] = row
    return n


@numba.njit(cache=True, nogil=True)
def _lookup_many(table_keys, table_vals, table_dist, queries, out_rows):
    for q in range(queries.shape[0]):
        out_rows[q] = _find(table_keys, table_vals, table_dist, queries[q])


@numba.njit(cache=True, nogil=True)
def _lookup_shifted(table_keys, table_vals, table_dist, base, shift, out_rows):
    """Look up ``base[q] + shift`` for every q without materialising the sum."""
    key = np.empty(base.shape[1], dtype=np.int64)
    for q in range(base.shape[0]):
        for d in range(base.shape[1]):
            key[d] = base[q, d] + shift[d]
        out_rows[q] = _find(table_keys, table_vals, table_dist, key)


def _as_coords(coords, dim: int) -> np.ndarray:
    arr = np.ascontiguousarray(coords, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"coordinate dimension mismatch: expected {dim}, got shape {arr.shape}")
    return arr


class MapBlock(NamedTuple):
    """A contiguous slot range of a coordinate map and the entries it holds."""

    start: int
    stop: int
    coords: np.ndarray
    rows: np.ndarray

    def __iter__(self) -> Iterator[tuple[tuple[int, ...], int]]:  # type: ignore[override]
        for c, r in zip(self.coords, self.rows):
            yield tuple(int(v) for v in c), int(r)

    def __len__(self) -> int:  # type: ignore[override]
        return len(self.rows)


class CoordinateMap:
    """Open-addressing map from integer coordinates to dense row indices."""

    def __init__(self, dim: int, capacity: int = 16):
        if dim < 1:
            raise ValueError("dimension must be >= 1")
        self.dim = int(dim)
        cap = 16
        while cap < capacity:
            cap *= 2
        self._alloc(cap)
        self._coord_buf = np.empty((8, self.dim), dtype=np.int64)
        self._n = 0

    def _alloc(self, cap: int) -> None:
        self._keys = np.zeros((cap, self.dim), dtype=np.int64)
        self._vals = np.full(cap, _EMPTY, dtype=np.int64)
        self._dist = np.zeros(cap, dtype=np.int64)

    def _reserve(self, extra: int) -> None:
        need = self._n + extra
        cap = self.capacity
        if need > cap * _MAX_LOAD:
            while need > cap * _MAX_LOAD:
                cap *= 2
            self._alloc(cap)
            rows = np.empty(self._n, dtype=np.int64)
            # Reinsert in row order so the layout only depends on insertion order.
            _insert_many(self._keys, self._vals, self._dist, self._coord_buf, 0,
                         self._coord_buf[: self._n].copy(), rows)
        if need > len(self._coord_buf):
            buf = np.empty((max(need, 2 * len(self._coord_buf)), self.dim), dtype=np.int64)
            buf[: self._n] = self._coord_buf[: self._n]
            self._coord_buf = buf

    @classmethod
    def from_coordinates(cls, coords) -> tuple["CoordinateMap", np.ndarray]:
        """Build a map from an M x D array; returns the map and the row of each input."""
        coords = np.asarray(coords, dtype=np.int64)
        cmap = cls(coords.shape[1])
        rows = cmap.insert_many(coords)
        return cmap, rows

    @property
    def capacity(self) -> int:
        return len(self._vals)

    @property
    def occupancy(self) -> int:
        return self._n

    def __len__(self) -> int:
        return self._n

    @property
    def coordinates(self) -> np.ndarray:
        """N x D coordinates in row order (read-only view)."""
        view = self._coord_buf[: self._n]
        view.flags.writeable = False
        return view

    def insert(self, coordinate) -> int:
        return int(self.insert_many(coordinate)[0])

    def insert_many(self, coords) -> np.ndarray:
        coords = _as_coords(coords, self.dim)
        self._reserve(len(coords))
        rows = np.empty(len(coords), dtype=np.int64)
        self._n = int(_insert_many(self._keys, self._vals, self._dist, self._coord_buf,
                                   self._n, coords, rows))
        return rows

    def lookup(self, coordinate) -> Optional[int]:
        row = int(self.lookup_many(coordinate)[0])
        return None if row < 0 else row

    def lookup_many(self, coords) -> np.ndarray:
        """Row index for each query coordinate, -1 where absent."""
        coords = _as_coords(coords, self.dim)
        rows = np.empty(len(coords), dtype=np.int64)
        _lookup_many(self._keys, self._vals, self._dist, coords, rows)
        return rows

    def lookup_shifted(self, coords: np.ndarray, shift) -> np.ndarray:
        coords = _as_coords(coords, self.dim)
        shift = np.ascontiguousarray(shift, dtype=np.int64)
        rows = np.empty(len(coords), dtype=np.int64)
        _lookup_shifted(self._keys, self._vals, self._dist, coords, shift, rows)
        return rows

    def __contains__(self, coordinate) -> bool:
        return self.lookup(coordinate) is not None

    def items(self) -> Iterator[tuple[tuple[int, ...], int]]:
        """Entries in table-slot order."""
        for block in self.parallel_blocks(1):
            yield from block

    def parallel_blocks(self, n_blocks: int) -> list[MapBlock]:
        """Split the table's slot range into ``n_blocks`` disjoint blocks.

        Each block can be processed by a separate worker; concatenating the
        blocks in order reproduces single-block iteration.
        """
        if n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        bounds = np.linspace(0, self.capacity, n_blocks + 1).astype(np.int64)
        blocks = []
        for start, stop in zip(bounds[:-1], bounds[1:]):
            vals = self._vals[start:stop]
            occupied = np.flatnonzero(vals != _EMPTY)
            rows = vals[occupied].copy()
            blocks.append(MapBlock(int(start), int(stop), self._coord_buf[rows].copy(), rows))
        return blocks

    def probe_lengths(self) -> np.ndarray:
        """Distance of every stored entry from its home slot."""
        return self._dist[self._vals != _EMPTY].copy()

    def copy(self) -> "CoordinateMap":
        other = CoordinateMap.__new__(CoordinateMap)
        other.dim = self.dim
        other._keys = self._keys.copy()
        other._vals = self._vals.copy()
        other._dist = self._dist.copy()
        other._coord_buf = self._coord_buf.copy()
        other._n = self._n
        return other

    def __repr__(self) -> str:
        return f"CoordinateMap(dim={self.dim}, n={self._n}, capacity={self.capacity})"


@dataclass
class SparseTensor:
    """Integer coordinates with a feature row per coordinate.

    When ``batched`` is set, column 0 of the coordinates is an instance index
    that never takes part in kernel offsets or pooling; ``tensor_stride`` only
    covers the spatial columns.
    """

    coords_map: CoordinateMap
    features: np.ndarray
    tensor_stride: np.ndarray = field(default=None)  # type: ignore[assignment]
    batched: bool = False

    def __post_init__(self):
        d = self.coords_map.dim - int(self.batched)
        if d < 1:
            raise ValueError("no spatial dimensions")
        if self.tensor_stride is None:
            self.tensor_stride = np.ones(d, dtype=np.int64)
        self.tensor_stride = np.asarray(self.tensor_stride, dtype=np.int64).reshape(-1)
        if len(self.tensor_stride) == 1 and d > 1:
            self.tensor_stride = np.repeat(self.tensor_stride, d)
        if self.tensor_stride.shape != (d,) or np.any(self.tensor_stride < 1):
            raise ValueError(f"tensor_stride must hold {d} positive integers")
        self.features = np.asarray(self.features)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1)
        if len(self.features) != len(self.coords_map):
            raise ValueError(
                f"{len(self.features)} feature rows for {len(self.coords_map)} coordinates")
        if np.any(self.spatial_coordinates % self.tensor_stride):
            raise ValueError("coordinates must be multiples of the tensor stride")

    @property
    def coordinates(self) -> np.ndarray:
        return self.coords_map.coordinates

    @property
    def spatial_coordinates(self) -> np.ndarray:
        return self.coordinates[:, 1:] if self.batched else self.coordinates

    @property
    def batch_indices(self) -> np.ndarray:
        if not self.batched:
            return np.zeros(len(self), dtype=np.int64)
        return self.coordinates[:, 0]

    @property
    def dim(self) -> int:
        return len(self.tensor_stride)

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.coords_map)

    def with_features(self, features: np.ndarray) -> "SparseTensor":
        return SparseTensor(self.coords_map, features, self.tensor_stride, self.batched)


def quantize(points, resolution: float, feats=None, batch=None):
    """Quantize real points onto an integer grid of cell size ``resolution``.

    Cell coordinates are ``floor(p / resolution)``.  Points sharing a cell are
    merged; the merged feature is the mean of the contributing features.

    ``batch`` optionally assigns an instance index to every point, producing a
    batched tensor (instances never share cells).

    Returns the tensor and, for every input point, the row it landed in.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points.reshape(-1, 1)
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    bad = ~np.isfinite(points).all(axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ValueError(f"non-finite point at row {row}: {points[row]}")
    if feats is None:
        feats = np.ones((len(points), 1))
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats.reshape(-1, 1)
    if len(feats) != len(points):
        raise ValueError("points and feats must have the same number of rows")
    if not np.isfinite(feats).all():
        row = int(np.flatnonzero(~np.isfinite(feats).all(axis=1))[0])
        raise ValueError(f"non-finite feature at row {row}")

    grid = np.floor(points / resolution).astype(np.int64)
    if batch is not None:
        batch = np.asarray(batch, dtype=np.int64).reshape(-1, 1)
        grid = np.hstack([batch, grid])
    cmap, rows = CoordinateMap.from_coordinates(grid)
    n = len(cmap)
    counts = np.bincount(rows, minlength=n).astype(np.float64)
    sums = np.zeros((n, feats.shape[1]))
    np.add.at(sums, rows, feats)
    tensor = SparseTensor(cmap, sums / counts[:, None], batched=batch is not None)
    return tensor, rows


# Serialization.
#
# Binary layout (little-endian):
#   magic    4 bytes  b"HDST"
#   version  uint32   1
#   D        uint32   coordinate columns (including the batch column if batched)
#   C        uint32   feature channels
#   N        uint64   rows
#   batched  uint8
#   stride   (D - batched) x int64
#   rows     N x (D x int64, C x float64), row-interleaved
#
# The CSV form carries the same header as a comment line
#   "# D=<D> C=<C> N=<N> batched=<0|1> stride=<s1;s2;...>"
# followed by N lines of D integers and C floats.

_TENSOR_MAGIC = b"HDST"
_TENSOR_VERSION = 1


def _row_dtype(d: int, c: int) -> np.dtype:
    return np.dtype([("coords", "<i8", (d,)), ("feats", "<f8", (c,))])


def save_tensor(path, tensor: SparseTensor, fmt: str = "binary") -> None:
    d = tensor.coords_map.dim
    c = tensor.num_channels
    n = len(tensor)
    if fmt == "binary":
        rows = np.empty(n, dtype=_row_dtype(d, c))
        rows["coords"] = tensor.coordinates
        rows["feats"] = tensor.features
        with open(path, "wb") as fh:
            fh.write(_TENSOR_MAGIC)
            fh.write(struct.pack("<IIIQB", _TENSOR_VERSION, d, c, n, int(tensor.batched)))
            fh.write(tensor.tensor_stride.astype("<i8").tobytes())
            fh.write(rows.tobytes())
    elif fmt == "csv":
        stride = ";".join(str(int(s)) for s in tensor.tensor_stride)
        with open(path, "w") as fh:
            fh.write(f"# D={d} C={c} N={n} batched={int(tensor.batched)} stride={stride}\n")
            for coord, feat in zip(tensor.coordinates, tensor.features):
                fh.write(",".join([str(int(v)) for v in coord] + [repr(float(v)) for v in feat]))
                fh.write("\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def load_tensor(path) -> SparseTensor:
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == _TENSOR_MAGIC:
            version, d, c, n, batched = struct.unpack("<IIIQB", fh.read(21))
            if version != _TENSOR_VERSION:
                raise ValueError(f"unsupported tensor file version {version}")
            stride = np.frombuffer(fh.read(8 * (d - batched)), dtype="<i8")
            rows = np.frombuffer(fh.read(), dtype=_row_dtype(d, c), count=n)
            coords = rows["coords"].astype(np.int64)
            feats = rows["feats"].astype(np.float64)
        else:
            fh.seek(0)
            text = fh.read().decode()
            lines = text.splitlines()
            if not lines or not lines[0].startswith("#"):
                raise ValueError("not a sparse tensor file")
            meta = dict(item.split("=") for item in lines[0][1:].split())
            d, c, n, batched = (int(meta[k]) for k in ("D", "C", "N", "batched"))
            stride = np.array([int(s) for s in meta["stride"].split(";")], dtype=np.int64)
            table = np.loadtxt(lines[1:], delimiter=",", ndmin=2) if n else np.zeros((0, d + c))
            coords = table[:, :d].astype(np.int64)
            feats = table[:, d:].astype(np.float64)
    cmap, rows_idx = CoordinateMap.from_coordinates(coords.reshape(n, d))
    if len(cmap) != n:
        raise ValueError("duplicate coordinates in tensor file")
    return SparseTensor(cmap, feats.reshape(n, c), stride.copy(), bool(batched))
