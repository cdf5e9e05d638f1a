#!/usr/bin/env python3
"""Short end-to-end training run on a handful of degraded scenes.

Optimizes all supervision terms jointly (perceptual, global and local
association, marginals, coarse and fine pose) with gradient descent and
compares held-out localization error before and after. Uses a small
configuration so it finishes in about a minute; the benchmark CLI runs
the full-size version.
"""

import os

import numpy as np

from bevloc import harness as H
from bevloc import registration as reg
from bevloc import worldgen as wg
from bevloc.benchmark import loss_curve_csv
from bevloc.geometry import wrap_angle

out = os.path.join(os.path.dirname(__file__), "out_training")
os.makedirs(out, exist_ok=True)


def scenes(seed0, n):
    return [
        H.scene_targets(
            wg.make_scenario(
                wg.ScenarioSpec(
                    seed=seed0 + i, window_size=8.0,
                    occlusion_fraction=0.25, noise_sigma=0.08,
                ),
                i,
            )
        )
        for i in range(n)
    ]


train_targets = scenes(100, 16)
eval_targets = scenes(9000, 12)

cfg = H.PipelineConfig(
    omega=reg.SolutionSpaceConfig(nx=6, ny=6, nphi=4),
    local_anchors=4, local_pairs=4, local_window=(8, 8),
)


def mae(params):
    errs = []
    for tgt in eval_targets:
        res = H.forward(tgt.obs, tgt.map_window, params, cfg)
        errs.append(
            [res.refined.x - tgt.offset.x, res.refined.y - tgt.offset.y,
             wrap_angle(res.refined.phi - tgt.offset.phi)]
        )
    return np.abs(np.array(errs)).mean(axis=0)


n_cells = H.assoc_cells(train_targets[0].obs, cfg)
params = H.init_pipeline_params(n_cells, cfg, seed=0)
before = mae(params)
print(f"held-out MAE before: x={before[0]:.3f} m  y={before[1]:.3f} m  "
      f"phi={np.degrees(before[2]):.3f} deg")

tc = H.TrainConfig(steps=120, batch_size=2, learning_rate=0.02, seed=0)
params, curve = H.train(train_targets, params, cfg, tc)
print(f"loss: {curve[0]['total']:.3f} -> {curve[-1]['total']:.3f} over {tc.steps} steps")

after = mae(params)
print(f"held-out MAE after : x={after[0]:.3f} m  y={after[1]:.3f} m  "
      f"phi={np.degrees(after[2]):.3f} deg")

with open(os.path.join(out, "loss_curve.csv"), "w") as f:
    f.write(loss_curve_csv(curve))
print(f"loss curve written to {out}/loss_curve.csv")
