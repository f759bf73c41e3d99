"""Sparse convolutional networks on high-dimensional coordinate sets."""

from .autodiff import Value, backward, parameter
from .coords import CoordinateMap, SparseTensor, load_tensor, quantize, save_tensor
from .kernel import (KernelMap, KernelRegion, PoolMap, build_kernel_map, build_pool_map,
                     cross_offsets, hypercubic_offsets, make_region)
from .models import (MLPBaseline, NetworkConfig, UNet, build_mlp_baseline, build_network,
                     build_unet, load_model, predict_inliers, save_model)

__version__ = "0.1.0"

__all__ = [
    "CoordinateMap", "SparseTensor", "quantize", "save_tensor", "load_tensor",
    "KernelRegion", "KernelMap", "PoolMap", "cross_offsets", "hypercubic_offsets",
    "make_region", "build_kernel_map", "build_pool_map",
    "Value", "parameter", "backward",
    "NetworkConfig", "UNet", "MLPBaseline", "build_unet", "build_mlp_baseline",
    "build_network", "predict_inliers", "save_model", "load_model",
]
