"""The U-shaped sparse ConvNet, the pointwise MLP baseline, and inlier prediction."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .coords import SparseTensor
from .kernel import KernelMap, PoolMap, build_kernel_map, build_pool_map, make_region
from .layers import BatchNormParams, load_checkpoint, save_checkpoint


@dataclass
class NetworkConfig:
    dim: int = 4
    kernel_shape: str = "cross"
    kernel_size: int = 3
    levels: int = 3
    channels: tuple[int, ...] = (32, 64, 128)
    blocks: int = 1
    in_channels: int = 5
    pool_stride: int = 2
    mlp_blocks: int = 4
    param_budget: int = 20_000_000

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)

    def validate(self, kind: str = "unet") -> None:
        problems = []
        if self.dim < 1:
            problems.append("dim must be >= 1")
        if self.levels < 1:
            problems.append("levels must be >= 1")
        if len(self.channels) != self.levels:
            problems.append(f"need one channel width per level ({self.levels}), "
                            f"got {len(self.channels)}")
        if any(c < 1 for c in self.channels):
            problems.append("channel widths must be positive")
        if self.kernel_shape not in ("cross", "hypercubic"):
            problems.append(f"unknown kernel shape {self.kernel_shape!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            problems.append("kernel size must be a positive odd integer")
        if self.blocks < 0 or self.mlp_blocks < 0:
            problems.append("block counts must be non-negative")
        if self.in_channels < 1:
            problems.append("in_channels must be positive")
        if self.levels > 1 and self.pool_stride < 2:
            problems.append("pool_stride must be >= 2")
        if problems:
            raise ValueError("invalid network config: " + "; ".join(problems))
        n = unet_param_count(self) if kind == "unet" else mlp_param_count(self)
        if n > self.param_budget:
            raise ValueError(
                f"invalid network config: {n} parameters exceed the budget of "
                f"{self.param_budget} (kernel volume {self.kernel_volume})")

    @property
    def kernel_volume(self) -> int:
        k, d = self.kernel_size, self.dim
        return k**d if self.kernel_shape == "hypercubic" else (k - 1) * d + 1

    def to_dict(self) -> dict:
        out = asdict(self)
        out["channels"] = list(self.channels)
        return out


def unet_param_count(cfg: NetworkConfig) -> int:
    """Closed-form number of trainable parameters of build_unet(cfg)."""
    m = cfg.kernel_volume
    ch = cfg.channels

    def conv_bn(a, b):
        return m * a * b + b + 2 * b

    n = conv_bn(cfg.in_channels, ch[0])
    for lvl, c in enumerate(ch):
        n += cfg.blocks * 2 * conv_bn(c, c)
        if lvl + 1 < len(ch):
            n += conv_bn(c, ch[lvl + 1])  # down
            n += conv_bn(ch[lvl + 1], c)  # up
            n += cfg.blocks * 2 * conv_bn(c, c)  # decoder blocks
    return n + ch[0] + 1


def mlp_param_count(cfg: NetworkConfig) -> int:
    w = max(cfg.channels)
    per_block = 2 * (w * w + w + 2 * w)
    return cfg.in_channels * w + w + 2 * w + cfg.mlp_blocks * per_block + w + 1


@dataclass
class Pyramid:
    """Coordinate hierarchy, kernel maps and pooling maps for one input."""

    tensors: list[SparseTensor]
    kernel_maps: list[KernelMap]
    pool_maps: list[PoolMap]
    _unit_maps: dict = field(default_factory=dict)

    @classmethod
    def build(cls, tensor: SparseTensor, cfg: NetworkConfig, workers: int = 1) -> "Pyramid":
        region = make_region(cfg.kernel_shape, cfg.dim, cfg.kernel_size)
        if tensor.dim != cfg.dim:
            raise ValueError(f"tensor has {tensor.dim} spatial dims, network expects {cfg.dim}")
        tensors, kmaps, pmaps = [tensor], [], []
        for lvl in range(cfg.levels):
            cur = tensors[-1]
            kmaps.append(build_kernel_map(cur, cur.coords_map, region, workers))
            if lvl + 1 < cfg.levels:
                pmap = build_pool_map(cur, cfg.pool_stride)
                pmaps.append(pmap)
                tensors.append(SparseTensor(pmap.out_map, np.zeros((pmap.n_out, 0)),
                                            pmap.out_stride, cur.batched))
        return cls(tensors, kmaps, pmaps)

    def levels_sizes(self) -> list[int]:
        return [len(t) for t in self.tensors]


class _Network:
    kind = "base"

    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float32):
        cfg.validate(self.kind)
        self.config = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Value] = {}
        self.bn: dict[str, BatchNormParams] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    def _build(self):
        raise NotImplementedError

    def _linear(self, name, c_in, c_out, slabs: int | None = None):
        std = np.sqrt(2.0 / c_in)
        shape = (c_in, c_out) if slabs is None else (slabs, c_in, c_out)
        w = self._rng.standard_normal(shape) * std
        if slabs is not None:
            w /= np.sqrt(slabs)
        self.params[f"{name}.weight"] = ad.parameter(w.astype(self.dtype), f"{name}.weight")
        self.params[f"{name}.bias"] = ad.parameter(np.zeros(c_out, self.dtype), f"{name}.bias")

    def _norm(self, name, c):
        self.params[f"{name}.gamma"] = ad.parameter(np.ones(c, self.dtype), f"{name}.gamma")
        self.params[f"{name}.beta"] = ad.parameter(np.zeros(c, self.dtype), f"{name}.beta")
        self.bn[name] = BatchNormParams.init(c, self.dtype)

    def _bn(self, name, x, training):
        return ad.batch_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                             self.bn[name], training)

    def parameters(self) -> list[Value]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
        for k, v in self.params.items():
            if state[k].shape != v.data.shape:
                raise ValueError(f"{k}: shape {state[k].shape} vs {v.data.shape}")
            v.data = state[k].astype(self.dtype).copy()
        for name, st in self.bn.items():
            st.running_mean[:] = state[f"{name}.running_mean"]
            st.running_var[:] = state[f"{name}.running_var"]

    def logits(self, tensor: SparseTensor, pyramid: Pyramid | None = None,
               training: bool = False) -> Value:
        raise NotImplementedError

    def __call__(self, tensor, pyramid=None, training=False) -> Value:
        return self.logits(tensor, pyramid, training)


class UNet(_Network):
    """U-shaped residual sparse ConvNet producing one logit per input row."""

    kind = "unet"

    def _build(self):
        cfg = self.config
        m = cfg.kernel_volume
        ch = cfg.channels
        self._linear("stem", cfg.in_channels, ch[0], m)
        self._norm("stem.bn", ch[0])
        for lvl, c in enumerate(ch):
            for b in range(cfg.blocks):
                self._block(f"enc{lvl}.{b}", c, m)
            if lvl + 1 < len(ch):
                self._linear(f"down{lvl}", c, ch[lvl + 1], m)
                self._norm(f"down{lvl}.bn", ch[lvl + 1])
                self._linear(f"up{lvl}", ch[lvl + 1], c, m)
                self._norm(f"up{lvl}.bn", c)
                for b in range(cfg.blocks):
                    self._block(f"dec{lvl}.{b}", c, m)
        self._linear("head", ch[0], 1)

    def _block(self, name, c, m):
        self._linear(f"{name}.conv1", c, c, m)
        self._norm(f"{name}.bn1", c)
        self._linear(f"{name}.conv2", c, c, m)
        self._norm(f"{name}.bn2", c)

    def _conv(self, name, x, kmap):
        return ad.conv(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], kmap)

    def _run_block(self, name, x, kmap, training):
        h = ad.relu(self._bn(f"{name}.bn1", self._conv(f"{name}.conv1", x, kmap), training))
        h = self._bn(f"{name}.bn2", self._conv(f"{name}.conv2", h, kmap), training)
        return ad.relu(h + x)

    def logits(self, tensor: SparseTensor, pyramid: Pyramid | None = None,
               training: bool = False) -> Value:
        cfg = self.config
        if tensor.num_channels != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, "
                             f"got {tensor.num_channels}")
        if pyramid is None:
            pyramid = Pyramid.build(tensor, cfg)
        km, pm = pyramid.kernel_maps, pyramid.pool_maps
        x = Value(tensor.features.astype(self.dtype))
        h = ad.relu(self._bn("stem.bn", self._conv("stem", x, km[0]), training))
        skips = []
        for lvl in range(cfg.levels):
            for b in range(cfg.blocks):
                h = self._run_block(f"enc{lvl}.{b}", h, km[lvl], training)
            if lvl + 1 < cfg.levels:
                skips.append(h)
                h = ad.sum_pool(h, pm[lvl])
                h = ad.relu(self._bn(f"down{lvl}.bn", self._conv(f"down{lvl}", h, km[lvl + 1]),
                                     training))
        for lvl in reversed(range(cfg.levels - 1)):
            h = ad.sum_unpool(h, pm[lvl])
            h = ad.relu(self._bn(f"up{lvl}.bn", self._conv(f"up{lvl}", h, km[lvl]), training))
            h = h + skips[lvl]
            for b in range(cfg.blocks):
                h = self._run_block(f"dec{lvl}.{b}", h, km[lvl], training)
        return ad.linear(h, self.params["head.weight"], self.params["head.bias"])


class MLPBaseline(_Network):
    """Shared per-row MLP with instance (context) normalisation and batch norm.

    Rows interact only through the per-instance normalisation statistics.
    """

    kind = "mlp"

    def _build(self):
        cfg = self.config
        w = max(cfg.channels)
        self._linear("stem", cfg.in_channels, w)
        self._norm("stem.bn", w)
        for b in range(cfg.mlp_blocks):
            for j in (1, 2):
                self._linear(f"block{b}.fc{j}", w, w)
                self._norm(f"block{b}.bn{j}", w)
        self._linear("head", w, 1)

    def _fc(self, name, x):
        return ad.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def logits(self, tensor: SparseTensor, pyramid: Pyramid | None = None,
               training: bool = False) -> Value:
        cfg = self.config
        if tensor.num_channels != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, "
                             f"got {tensor.num_channels}")
        groups = tensor.batch_indices
        x = Value(tensor.features.astype(self.dtype))
        h = ad.relu(self._bn("stem.bn", self._fc("stem", x), training))
        for b in range(cfg.mlp_blocks):
            r = h
            for j in (1, 2):
                h = ad.instance_norm(self._fc(f"block{b}.fc{j}", h), groups)
                h = self._bn(f"block{b}.bn{j}", h, training)
                if j == 1:
                    h = ad.relu(h)
            h = ad.relu(h + r)
        return self._fc("head", h)


def build_unet(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> UNet:
    return UNet(cfg, seed, dtype)


def build_mlp_baseline(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> MLPBaseline:
    return MLPBaseline(cfg, seed, dtype)


def build_network(kind: str, cfg: NetworkConfig, seed: int = 0, dtype=np.float32):
    if kind == "unet":
        return build_unet(cfg, seed, dtype)
    if kind == "mlp":
        return build_mlp_baseline(cfg, seed, dtype)
    raise ValueError(f"unknown model kind {kind!r}")


def coordinate_features(points: np.ndarray, batch: np.ndarray | None = None) -> np.ndarray:
    """Per-point input features: a ones channel and instance-centred coordinates.

    Coordinates are centred on the instance mean and divided by the instance's
    RMS spread, so features do not change when a whole instance is translated.
    """
    points = np.asarray(points, dtype=np.float64)
    if batch is None:
        batch = np.zeros(len(points), dtype=np.int64)
    feats = np.empty((len(points), points.shape[1] + 1))
    feats[:, 0] = 1.0
    for b in np.unique(batch):
        sel = batch == b
        p = points[sel]
        centred = p - p.mean(axis=0)
        spread = np.sqrt((centred**2).sum(axis=1).mean())
        feats[sel, 1:] = centred / (spread if spread > 0 else 1.0)
    return feats


def predict_inliers(network, tensor: SparseTensor, provenance: np.ndarray,
                    pyramid: Pyramid | None = None, threshold: float = 0.5):
    """Per-point inlier probability and decision (probability >= threshold)."""
    provenance = np.asarray(provenance)
    if provenance.size and (provenance.min() < 0 or provenance.max() >= len(tensor)):
        raise ValueError("provenance refers to rows outside the tensor")
    if network.kind == "unet" and pyramid is None:
        pyramid = Pyramid.build(tensor, network.config)
    logits = network.logits(tensor, pyramid, training=False).data.reshape(-1)
    prob = ad.sigmoid(logits.astype(np.float64))[provenance]
    return prob, prob >= threshold


def save_model(path, network, extra: dict | None = None) -> None:
    """Write weights plus architecture; ``extra`` is stored verbatim under "run"."""
    meta = {"kind": network.kind, "config": network.config.to_dict(),
            "dtype": network.dtype.name, "format": "hdconv-model/1"}
    if extra is not None:
        meta["run"] = extra
    save_checkpoint(path, network.state_dict(), meta)


def load_model(path, with_meta: bool = False):
    tensors, meta = load_checkpoint(path)
    if meta.get("format") != "hdconv-model/1":
        raise ValueError(f"{path} is not a model checkpoint")
    cfg = NetworkConfig(**meta["config"])
    net = build_network(meta["kind"], cfg, 0, np.dtype(meta["dtype"]))
    net.load_state_dict(tensors)
    return (net, meta) if with_meta else net
