"""Sparse tensors, kernel maps and pooling on a tiny 2D example.

    python3 demos/01_sparse_tensors.py
"""

import numpy as np

from hdconv import quantize
from hdconv.kernel import build_kernel_map, build_pool_map, cross_offsets, format_kernel_map

rng = np.random.default_rng(0)

# A handful of points in the unit square, snapped onto a 0.25 grid.
points = rng.uniform(0, 1, (12, 2))
tensor, provenance = quantize(points, 0.25, np.ones((12, 1)))
print(f"{len(points)} points fell into {len(tensor)} occupied cells")
for row, coord in enumerate(tensor.coordinates.tolist()):
    members = np.flatnonzero(provenance == row)
    print(f"  row {row} cell {tuple(coord)} <- points {members.tolist()}")

# The kernel map lists, for every offset of a 3x3 cross, which input rows
# feed which output rows.  Convolution is one matmul per offset over these pairs.
kmap = build_kernel_map(tensor, tensor.coords_map, cross_offsets(2, 3))
print("\nkernel map (offset: in->out):")
print(format_kernel_map(kmap))

# Stride-2 sum pooling merges cells that share floor(coord / 2).
pmap = build_pool_map(tensor, 2)
print(f"\npooling: {pmap.n_in} cells -> {pmap.n_out} coarse cells")
print("children per coarse cell:", pmap.child_counts().tolist())
print("coarse tensor stride:", pmap.out_stride.tolist())
