"""Rigid registration from 95%-outlier correspondences.

An exact correspondence (x, Rx + t) lies on a 3D plane in 6D space, so a 6D
sparse network can learn to pick the plane out of the clutter.  We compare
RANSAC on the raw correspondences against RANSAC on the network's selection.

    python3 demos/04_registration.py [steps] [scenes]
"""

import sys

import numpy as np

from hdconv import experiment, geom

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 60
n_eval = int(sys.argv[2]) if len(sys.argv) > 2 else 10

cfg = experiment.make_config(overrides=["task=reg3d", f"train.steps={steps}", "data.scenes=32",
                                        f"data.eval_scenes={n_eval}"])

# Sanity check of the geometry: inliers sit on the plane, outliers do not.
scene = experiment.generate_scenes(cfg, "eval")[0]
T = geom.RigidTransform.from_dict(scene.params["transform"])
res = np.linalg.norm(geom.rigid_plane_residual(scene.points[:, :3], scene.points[:, 3:], T), axis=1)
print(f"plane residual: inliers median {np.median(res[scene.labels == 1]):.3f}, "
      f"outliers median {np.median(res[scene.labels == 0]):.3f}")

net = experiment.new_network(cfg)
batches = experiment.make_batches(cfg, experiment.generate_scenes(cfg, "train"), "unet")
history = experiment.train(net, batches, cfg)
print(f"trained {steps} steps, loss {history[0]['loss']:.3f} -> {history[-1]['loss']:.3f}")

rows = experiment.register_scenes(experiment.generate_scenes(cfg, "eval"), net, cfg)
print(f"\n{'method':<16}{'success':>10}{'rot err':>10}{'trans err':>11}{'inliers':>10}")
for name, row in rows.items():
    print(f"{name:<16}{row['success_rate']:10.2f}{row['rotation_error']:10.2f}"
          f"{row['translation_error']:11.3f}{row['inlier_ratio']:10.3f}")
