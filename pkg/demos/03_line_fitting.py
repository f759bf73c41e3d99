"""Finding a line hidden in 4D clutter: sparse U-Net vs. a pointwise MLP.

About 5% of the points lie near a random line; the rest are uniform noise.
Both models see the same quantized input and train for the same number of
steps.  The U-Net can use spatial context, the MLP only sees one cell at a time.

    python3 demos/03_line_fitting.py [steps]
"""

import sys

from hdconv import experiment

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 150

cfg = experiment.make_config(overrides=[f"train.steps={steps}", "data.scenes=4",
                                        "data.eval_scenes=2", "network.channels=[16,32,64]"])
train_scenes = experiment.generate_scenes(cfg, "train")
eval_scenes = experiment.generate_scenes(cfg, "eval")
s = train_scenes[0]
print(f"each scene: {len(s)} points in {s.dim}D, inlier ratio {s.inlier_ratio:.3f}")

for model in ("unet", "mlp"):
    net = experiment.new_network(cfg, model)
    batches = experiment.make_batches(cfg, train_scenes, model)
    evals = experiment.make_batches(cfg, eval_scenes, model)
    history = experiment.train(net, batches, cfg)
    scores = experiment.evaluate(net, evals)
    print(f"{model:>5}: {net.num_parameters():7d} params, loss {history[0]['loss']:.3f} -> "
          f"{history[-1]['loss']:.3f}, eval F1 {scores['f1']:.3f}, AP {scores['ap']:.3f}")
