"""Why cross-shaped kernels: cost of kernel maps and convolutions as D grows."""

from hdconv import bench
from hdconv.kernel import make_region

print(" D   cross(3)  hypercubic(3)")
for d in range(1, 9):
    print(f"{d:2d} {len(make_region('cross', d, 3)):9d} {len(make_region('hypercubic', d, 3)):14d}")

print("\nmatmuls per 6D convolution:", bench.matmul_counts(6, 3))

print("\nkernel map build time, 10k points:")
for row in bench.kernel_map_times(sizes=(10_000,), dims=(2, 4, 6), repeats=1):
    print(f"  D={row['dim']} {row['shape']:<10} {row['offsets']:4d} offsets  "
          f"{row['time_s'] * 1e3:8.1f} ms")

print("\npooling is linear in N (8D):")
for row in bench.pooling_scaling(sizes=(10_000, 100_000), dim=8):
    print(f"  N={row['n']:>7}: time(2N)/time(N) = {row['ratio']:.2f}")
