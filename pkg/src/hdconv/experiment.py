"""Run configuration, data preparation, training and evaluation pipelines."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import time
import zlib
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import autodiff as ad
from . import geom, metrics
from .coords import SparseTensor, quantize
from .models import NetworkConfig, Pyramid, build_network, coordinate_features, predict_inliers

log = logging.getLogger(__name__)

TASKS = ("line", "plane", "reg3d", "epipolar")


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class DataConfig:
    dim: int = 4
    n_points: int = 8000
    inlier_ratio: float = 0.05
    sigma: float = 0.02
    extent: float = 1.0
    resolution: float = 0.02
    voxel_size: float = 0.05
    noise: float = 0.0
    tau: float = geom.DEFAULT_EPIPOLAR_TAU
    scenes: int = 8
    eval_scenes: int = 4


@dataclass
class TrainConfig:
    model: str = "unet"
    steps: int = 400
    batch_size: int = 1
    lr: float = 1e-3
    optimizer: str = "adam"
    loss: str = "auto"
    eval_every: int = 50
    precision: str = "float32"


@dataclass
class RunConfig:
    task: str = "line"
    seed: int = 0
    workers: int = 1
    output: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        d = self.data
        if self.task in ("line", "plane") and d.dim < 2:
            raise ValueError(f"{self.task} task needs dim >= 2, got {d.dim}")
        if not 0 < d.inlier_ratio <= 1:
            raise ValueError("inlier_ratio must lie in (0, 1]")
        if d.n_points < 1 or d.scenes < 0 or d.eval_scenes < 0:
            raise ValueError("n_points must be positive and scene counts non-negative")
        if d.resolution <= 0 or d.voxel_size <= 0:
            raise ValueError("resolution and voxel_size must be positive")
        if self.train.steps < 0 or self.train.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.train.model not in ("unet", "mlp"):
            raise ValueError(f"unknown model {self.train.model!r}")
        if self.train.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.network.dim != self.space_dim:
            raise ValueError(f"network.dim={self.network.dim} but the {self.task} task lives "
                             f"in {self.space_dim} dimensions")
        if self.network.in_channels != self.space_dim + 1:
            raise ValueError(f"network.in_channels must be {self.space_dim + 1}")
        self.network.validate(self.train.model)

    @property
    def space_dim(self) -> int:
        return {"reg3d": 6, "epipolar": 4}.get(self.task, self.data.dim)

    @property
    def resolution(self) -> float:
        return {"reg3d": self.data.voxel_size, "epipolar": 0.01}.get(self.task,
                                                                    self.data.resolution)

    @property
    def loss(self) -> str:
        if self.train.loss != "auto":
            return self.train.loss
        return "cross_entropy" if self.task in ("line", "plane") else "balanced_cross_entropy"

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["network"] = self.network.to_dict()
        return out


def _merge(obj, values: dict, prefix: str = ""):
    for key, val in values.items():
        if not hasattr(obj, key):
            raise ValueError(f"unknown config key {prefix}{key}")
        cur = getattr(obj, key)
        if dataclasses.is_dataclass(cur):
            if not isinstance(val, dict):
                raise ValueError(f"{prefix}{key} must be a mapping")
            _merge(cur, val, f"{prefix}{key}.")
        else:
            if isinstance(cur, tuple):
                val = tuple(val)
            elif isinstance(cur, bool):
                val = bool(val)
            elif isinstance(cur, int) and not isinstance(val, bool):
                val = int(val)
            elif isinstance(cur, float):
                val = float(val)
            setattr(obj, key, val)


def task_defaults(task: str) -> dict:
    """Per-task default overrides applied before the user's config."""
    if task == "reg3d":
        return {"data": {"n_points": 500, "inlier_ratio": 0.05, "voxel_size": 0.05,
                         "noise": 0.01, "scenes": 64, "eval_scenes": 50},
                "network": {"dim": 6, "in_channels": 7, "kernel_shape": "hypercubic",
                            "channels": [16, 32, 64]},
                "train": {"batch_size": 4, "steps": 300}}
    if task == "epipolar":
        return {"data": {"n_points": 2000, "inlier_ratio": 0.2, "scenes": 16},
                "network": {"dim": 4, "in_channels": 5}}
    return {}


def make_config(values: dict | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Resolve defaults, task defaults, a config mapping and ``key=value`` overrides.

    Overrides win over the mapping.
    """
    values = copy.deepcopy(values or {})
    flat = {}
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not of the form key=value")
        flat[key.strip()] = yaml.safe_load(raw)
    task = flat.get("task", values.get("task", "line"))
    if task == "line" or task == "plane":
        dim = flat.get("data.dim", values.get("data", {}).get("dim", DataConfig.dim))
        base = {"network": {"dim": dim, "in_channels": dim + 1}}
    else:
        base = task_defaults(task)
    cfg = RunConfig()
    _merge(cfg, base)
    _merge(cfg, values)
    for key, val in flat.items():
        parts = key.split(".")
        nested = val
        for p in reversed(parts):
            nested = {p: nested}
        _merge(cfg, nested)
    cfg.validate()
    return cfg


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    values = {}
    if path:
        with open(path) as fh:
            values = yaml.safe_load(fh) or {}
    return make_config(values, overrides)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from the run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def scene_seeds(seed: int, name: str, n: int) -> list[int]:
    return [int(s) for s in substream(seed, name).integers(0, 2**31 - 1, n)]


def generate_scene(cfg: RunConfig, seed: int) -> geom.Dataset:
    d = cfg.data
    if cfg.task in ("line", "plane"):
        n_in = int(round(d.n_points * d.inlier_ratio))
        sampler = geom.sample_line_dataset if cfg.task == "line" else geom.sample_plane_dataset
        return sampler(d.dim, n_in, d.n_points - n_in, d.sigma, d.extent, seed)
    if cfg.task == "reg3d":
        return geom.make_3d_correspondences(d.n_points, d.inlier_ratio, d.noise, None, seed,
                                            d.voxel_size, d.extent)
    return geom.make_epipolar_correspondences(d.n_points, d.inlier_ratio, None, seed, d.tau)


def generate_scenes(cfg: RunConfig, split: str) -> list[geom.Dataset]:
    n = cfg.data.scenes if split == "train" else cfg.data.eval_scenes
    return [generate_scene(cfg, s) for s in scene_seeds(cfg.seed, f"dataset/{split}", n)]


@dataclass
class Prepared:
    """Quantized network input for one or more scenes."""

    tensor: SparseTensor
    provenance: np.ndarray  # row of every input point
    point_labels: np.ndarray
    cell_labels: np.ndarray
    pyramid: Pyramid | None
    scene_index: np.ndarray  # which scene each point belongs to

    def split(self, values: np.ndarray) -> list[np.ndarray]:
        return [values[self.scene_index == i] for i in range(int(self.scene_index.max()) + 1)]


def prepare(scenes: list[geom.Dataset], resolution: float, net_cfg: NetworkConfig,
            build_pyramid: bool = True, workers: int = 1) -> Prepared:
    points = np.vstack([s.points for s in scenes])
    labels = np.concatenate([s.labels for s in scenes])
    batch = np.concatenate([np.full(len(s), i, dtype=np.int64) for i, s in enumerate(scenes)])
    feats = coordinate_features(points, batch)
    tensor, prov = quantize(points, resolution, feats, batch if len(scenes) > 1 else None)
    # A cell is an inlier when at least half of its points are.
    sums = np.bincount(prov, weights=labels, minlength=len(tensor))
    counts = np.bincount(prov, minlength=len(tensor))
    cell_labels = (sums / counts >= 0.5).astype(np.int64)
    pyramid = Pyramid.build(tensor, net_cfg, workers) if build_pyramid else None
    return Prepared(tensor, prov, labels, cell_labels, pyramid, batch)


def make_batches(cfg: RunConfig, scenes: list[geom.Dataset], model: str) -> list[Prepared]:
    bs = cfg.train.batch_size
    groups = [scenes[i:i + bs] for i in range(0, len(scenes), bs)]
    return [prepare(g, cfg.resolution, cfg.network, model == "unet", cfg.workers)
            for g in groups]


def _loss_fn(name: str):
    return {"cross_entropy": ad.cross_entropy,
            "balanced_cross_entropy": ad.balanced_cross_entropy}[name]


def evaluate(network, prepared: list[Prepared]) -> dict:
    """Point-level F1 / AP / precision / recall averaged over scenes."""
    f1s, aps, ps, rs = [], [], [], []
    for prep in prepared:
        prob, decision = predict_inliers(network, prep.tensor, prep.provenance, prep.pyramid)
        for p, d, y in zip(prep.split(prob), prep.split(decision), prep.split(prep.point_labels)):
            f1s.append(metrics.f1(d.astype(int), y))
            aps.append(metrics.average_precision(p, y))
            pr, rc = metrics.precision_recall(d.astype(int), y)
            ps.append(pr)
            rs.append(rc)
    return {"f1": float(np.nanmean(f1s)), "ap": float(np.nanmean(aps)),
            "precision": float(np.nanmean(ps)), "recall": float(np.nanmean(rs))}


def _layer_stats(network) -> dict:
    return {name: {"absmax": float(np.abs(v.data).max()),
                   "finite": bool(np.isfinite(v.data).all())}
            for name, v in network.params.items()}


def train(network, batches: list[Prepared], cfg: RunConfig, log_path=None,
          eval_batches: list[Prepared] | None = None, callback=None) -> list[dict]:
    """Train for cfg.train.steps steps; returns the per-step records.

    Batches are visited in a seeded random order (substream "train").
    """
    t = cfg.train
    state = ad.OptimizerState(kind=t.optimizer, lr=t.lr)
    opt = ad.Optimizer(network.parameters(), state)
    loss_fn = _loss_fn(cfg.loss)
    rng = substream(cfg.seed, "train")
    history = []
    fh = open(log_path, "w") if log_path else None
    try:
        order = []
        for step in range(t.steps):
            if not order:
                order = list(rng.permutation(len(batches)))
            prep = batches[order.pop()]
            start = time.perf_counter()
            out = network(prep.tensor, prep.pyramid, training=True)
            loss = loss_fn(out, prep.cell_labels)
            value = float(loss.data)
            if not np.isfinite(value):
                stats = _layer_stats(network)
                raise NumericalError(f"non-finite loss at step {step}: "
                                     f"{json.dumps(stats, sort_keys=True)}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            rec = {"step": step, "loss": value,
                   "wall_ms": round((time.perf_counter() - start) * 1e3, 3)}
            if eval_batches and t.eval_every and ((step + 1) % t.eval_every == 0
                                                  or step + 1 == t.steps):
                rec.update({f"eval_{k}": v for k, v in evaluate(network, eval_batches).items()})
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if callback:
                callback(rec)
    finally:
        if fh:
            fh.close()
    return history


def new_network(cfg: RunConfig, model: str | None = None):
    model = model or cfg.train.model
    dtype = np.float64 if cfg.train.precision == "float64" else np.float32
    init_seed = int(substream(cfg.seed, f"init/{model}").integers(2**31 - 1))
    return build_network(model, cfg.network, init_seed, dtype)


# Registration with and without network filtering.

def register_scenes(scenes: list[geom.Dataset], network, cfg: RunConfig,
                    iterations: int = 1000, rot_thresh: float = 15.0,
                    trans_thresh: float = 0.30) -> dict:
    """RANSAC on raw correspondences vs. network-filtered correspondences."""
    raw, filtered = [], []
    raw_ratio, filt_ratio = [], []
    seeds = scene_seeds(cfg.seed, "ransac", len(scenes))
    for scene, seed in zip(scenes, seeds):
        truth = geom.RigidTransform.from_dict(scene.params["transform"])
        tau = scene.params["tau"]
        src, dst = scene.points[:, :3], scene.points[:, 3:]
        res = geom.ransac_registration(src, dst, iterations, tau, seed)
        raw.append(metrics.evaluate_registration(res.transform, truth))
        raw_ratio.append(scene.labels.mean())
        prep = prepare([scene], cfg.resolution, cfg.network, network.kind == "unet", cfg.workers)
        _, keep = predict_inliers(network, prep.tensor, prep.provenance, prep.pyramid)
        if keep.sum() >= 3:
            res = geom.ransac_registration(src[keep], dst[keep], iterations, tau, seed)
            filt_ratio.append(scene.labels[keep].mean())
        else:
            res = geom.RansacResult(None, np.zeros(int(keep.sum()), bool), -1)
            filt_ratio.append(0.0)
        filtered.append(metrics.evaluate_registration(res.transform, truth))
    rows = {}
    for name, results, ratios in (("ransac", raw, raw_ratio),
                                  ("network+ransac", filtered, filt_ratio)):
        summary = metrics.registration_summary(results, rot_thresh, trans_thresh)
        summary["inlier_ratio"] = float(np.mean(ratios))
        rows[name] = summary
    return rows
