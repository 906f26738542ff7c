"""Train a small set model on spheres, sample new clouds and denoise a corrupted one.

A couple of hundred iterations give only a rough model; longer runs pull the
samples onto the surface.

    python demos/point_cloud_denoise.py [iters]
"""
import sys

import numpy as np

from ebp import metrics
from ebp import trainer as T
from ebp.data import ShapeSpec, gen_shape, perturb, shape_dataset, surface_residual
from ebp.ndgrad import Tensor

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 200
clouds, _ = shape_dataset(["sphere"], 100, 128, seed=0)
config = T.TrainConfig(batch_size=8, steps=10, lr=1e-3, sampler_lr=1e-4, iters=iters,
                       log_every=50)
state = T.build_state(config, 3)
T.train(clouds, state=state)
last = state.history[-1]
print(f"data energy {last.data_term:.4f}, sampler energy {-last.sampler_term:.4f}")

rng = np.random.default_rng(1)
theta = Tensor(rng.standard_normal((4, config.theta_dim)))
state.sampler.first_order = True
out = state.sampler(lambda x: state.model.element_energy(x, theta), theta, 128, rng)
samples = out.x.data
res = [np.abs(surface_residual(s, "sphere")).mean() for s in samples]
print("mean distance of sampled points from the unit sphere:", np.round(res, 3))

clean = gen_shape(ShapeSpec("sphere", 256, seed=7))
noisy, mask = perturb(clean, radius=0.5, noise=0.1, seed=3)
fixed = T.denoise(noisy, mask, state.model)
print(f"{mask.sum()} points perturbed; chamfer to clean {metrics.chamfer(noisy, clean):.5f} "
      f"-> {metrics.chamfer(fixed, clean):.5f}")
