"""Forward and backward rules of the sparse layers.

Every function here works on plain feature matrices plus the kernel / pooling
maps that describe the sparsity pattern.  The tape in ``hdconv.autodiff``
strings them together.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .kernel import KernelMap, KernelRegion, PoolMap

# Instrumentation: number of gathered matrix products issued by conv_forward.
counters: Counter = Counter()


@dataclass
class ConvParams:
    weights: np.ndarray  # |region| x C_in x C_out
    bias: np.ndarray  # C_out
    region: KernelRegion

    def __post_init__(self):
        if self.weights.shape[0] != len(self.region):
            raise ValueError(
                f"{self.weights.shape[0]} weight slabs for a {len(self.region)}-offset region")
        if self.bias.shape != (self.weights.shape[2],):
            raise ValueError("bias width must equal C_out")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("non-finite convolution parameters")

    @classmethod
    def init(cls, region: KernelRegion, c_in: int, c_out: int, rng, dtype=np.float64):
        # He initialisation; the effective fan-in of a sparse kernel is data
        # dependent, so use the channel fan-in only.
        std = np.sqrt(2.0 / c_in)
        weights = (rng.standard_normal((len(region), c_in, c_out)) * std / np.sqrt(len(region)))
        return cls(weights.astype(dtype), np.zeros(c_out, dtype=dtype), region)


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")

    @classmethod
    def init(cls, channels: int, dtype=np.float64, eps: float = 1e-5, momentum: float = 0.1):
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), eps, momentum)


def _check_conv(feats, weights, kmap: KernelMap):
    if feats.ndim != 2 or feats.shape[0] != kmap.n_in:
        raise ValueError(f"input has {feats.shape[0]} rows, kernel map expects {kmap.n_in}")
    if weights.ndim != 3 or weights.shape[0] != len(kmap):
        raise ValueError("weight slab count does not match kernel map offsets")
    if feats.shape[1] != weights.shape[1]:
        raise ValueError(f"C_in mismatch: features {feats.shape[1]}, weights {weights.shape[1]}")


def conv_forward(feats: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                 kmap: KernelMap) -> np.ndarray:
    """out[j] = bias + sum_o sum_{(i, j) in kmap[o]} feats[i] @ W_o."""
    _check_conv(feats, weights, kmap)
    out = np.zeros((kmap.n_out, weights.shape[2]), dtype=np.result_type(feats, weights))
    # Within one offset every output row receives at most one input row, so
    # fancy-index accumulation is exact (no duplicate targets).
    for k in range(len(kmap)):
        ins, outs = kmap.in_rows[k], kmap.out_rows[k]
        counters["conv_matmul"] += 1
        if kmap.identity[k]:
            out += feats @ weights[k]
        elif len(ins):
            out[outs] += feats[ins] @ weights[k]
    out += bias
    return out


def conv_backward(grad_out: np.ndarray, feats: np.ndarray, weights: np.ndarray,
                  kmap: KernelMap):
    _check_conv(feats, weights, kmap)
    if grad_out.shape != (kmap.n_out, weights.shape[2]):
        raise ValueError("grad_out shape does not match the forward output")
    grad_in = np.zeros_like(feats, dtype=np.result_type(feats, grad_out))
    grad_w = np.zeros_like(weights, dtype=np.result_type(weights, grad_out))
    for k in range(len(kmap)):
        ins, outs = kmap.in_rows[k], kmap.out_rows[k]
        if kmap.identity[k]:
            grad_w[k] = feats.T @ grad_out
            grad_in += grad_out @ weights[k].T
        elif len(ins):
            g = grad_out[outs]
            grad_w[k] = feats[ins].T @ g
            grad_in[ins] += g @ weights[k].T
    return grad_in, grad_w, grad_out.sum(axis=0)


def sum_pool_forward(feats: np.ndarray, pmap: PoolMap) -> np.ndarray:
    if feats.shape[0] != pmap.n_in:
        raise ValueError("feature rows do not match the pooling map")
    if pmap.n_in == 0:
        return np.zeros((0, feats.shape[1]), dtype=feats.dtype)
    # Children sorted by parent (stable), summed in input-row order per cell.
    order, starts = pmap.segments()
    return np.add.reduceat(feats[order], starts, axis=0)


def sum_pool_backward(grad_out: np.ndarray, pmap: PoolMap) -> np.ndarray:
    if grad_out.shape[0] != pmap.n_out:
        raise ValueError("gradient rows do not match the pooling map")
    return grad_out[pmap.parents]


def sum_unpool(coarse: np.ndarray, pmap: PoolMap | None) -> np.ndarray:
    """Broadcast each coarse row back to its children (transpose of sum pooling)."""
    if pmap is None:
        raise ValueError("unpooling needs the pooling map cached by the matching downsampling")
    return sum_pool_backward(coarse, pmap)


def sum_unpool_backward(grad_fine: np.ndarray, pmap: PoolMap) -> np.ndarray:
    return sum_pool_forward(grad_fine, pmap)


def batch_norm_forward(x: np.ndarray, params: BatchNormParams, training: bool = True):
    """Normalise every channel over all rows; returns output and a backward cache."""
    if training:
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        n = x.shape[0]
        m = params.momentum
        params.running_mean[:] = (1 - m) * params.running_mean + m * mean
        unbiased = var * n / (n - 1) if n > 1 else var
        params.running_var[:] = (1 - m) * params.running_var + m * unbiased
    else:
        mean, var = params.running_mean, params.running_var
    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - mean) * inv_std
    y = xhat * params.gamma + params.beta
    return y, (xhat, inv_std, training)


def batch_norm_backward(grad_y: np.ndarray, gamma: np.ndarray, cache):
    xhat, inv_std, training = cache
    grad_gamma = (grad_y * xhat).sum(axis=0)
    grad_beta = grad_y.sum(axis=0)
    g = grad_y * gamma
    if training:
        grad_x = inv_std * (g - g.mean(axis=0) - xhat * (g * xhat).mean(axis=0))
    else:
        grad_x = g * inv_std
    return grad_x, grad_gamma, grad_beta


def _segment_mean(x: np.ndarray, groups: np.ndarray, n_groups: int):
    if n_groups == 1:
        return x.mean(axis=0, keepdims=True)
    counts = np.bincount(groups, minlength=n_groups).astype(x.dtype)
    onehot = np.zeros((n_groups, len(groups)), dtype=x.dtype)
    onehot[groups, np.arange(len(groups))] = 1
    return (onehot @ x) / np.maximum(counts, 1)[:, None]


def instance_norm_forward(x: np.ndarray, groups: np.ndarray, eps: float = 1e-5):
    """Normalise each channel over the rows of each instance (no affine)."""
    n_groups = int(groups.max()) + 1 if len(groups) else 0
    mean = _segment_mean(x, groups, n_groups)
    centred = x - mean[groups]
    var = _segment_mean(centred**2, groups, n_groups)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std[groups]
    return xhat, (xhat, inv_std, groups, n_groups)


def instance_norm_backward(grad_y: np.ndarray, cache):
    xhat, inv_std, groups, n_groups = cache
    mean_g = _segment_mean(grad_y, groups, n_groups)[groups]
    mean_gx = _segment_mean(grad_y * xhat, groups, n_groups)[groups]
    return inv_std[groups] * (grad_y - mean_g - xhat * mean_gx)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_y: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_y * (x > 0)


def residual_add(a, b):
    """Elementwise sum of two sparse tensors over the same coordinate map."""
    if a.coords_map is not b.coords_map:
        same = (len(a) == len(b) and np.array_equal(a.coordinates, b.coordinates)
                and np.array_equal(a.tensor_stride, b.tensor_stride))
        if not same:
            raise ValueError("residual_add requires identical coordinate maps")
    if a.features.shape != b.features.shape:
        raise ValueError("residual_add requires identical channel counts")
    return a.with_features(a.features + b.features)


def global_avg_pool(x: np.ndarray, groups: np.ndarray | None = None) -> np.ndarray:
    """Column means per instance (a single 1 x C row without ``groups``)."""
    if x.shape[0] == 0:
        raise ValueError("global pooling of an empty tensor")
    if groups is None:
        return x.mean(axis=0, keepdims=True)
    return _segment_mean(x, groups, int(groups.max()) + 1)


def global_avg_pool_backward(grad: np.ndarray, n_rows: int,
                             groups: np.ndarray | None = None) -> np.ndarray:
    if groups is None:
        return np.repeat(grad / n_rows, n_rows, axis=0)
    counts = np.bincount(groups, minlength=grad.shape[0]).astype(grad.dtype)
    return (grad / counts[:, None])[groups]


# Parameter checkpoints.
#
# Layout (little-endian):
#   magic     4 bytes b"HDCK"
#   version   uint32  1
#   meta_len  uint32, then meta_len bytes of UTF-8 JSON (free-form metadata)
#   count     uint32
#   count records of:
#     name_len uint16, name (UTF-8)
#     dtype    uint8   0 = float32, 1 = float64, 2 = int64
#     ndim     uint8, then ndim x uint64 shape
#     data     C-order little-endian values

_CKPT_MAGIC = b"HDCK"
_CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            code = _DTYPE_CODES.get(arr.dtype)
            if code is None:
                raise TypeError(f"unsupported dtype {arr.dtype} for {name!r}")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a parameter checkpoint")
        version, meta_len = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(fh.read(meta_len).decode())
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            dtype = _DTYPES[code]
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(size * dtype.itemsize), dtype=dtype)
            tensors[name] = data.reshape(shape).astype(dtype.newbyteorder("="))
    return tensors, meta
