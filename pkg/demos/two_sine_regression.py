"""Fit a conditional energy-based process to the bimodal two-sine toy data.

Every function is either +sin or -sin of its index plus noise.  After
training, the predictive density given a small context should show one ridge
per mode.  The default 3000 iterations (about two minutes) show the two ridges
forming; around 10000 they settle near +1 and -1.

    python demos/two_sine_regression.py [iters]
"""
import sys

import numpy as np

from ebp import trainer as T
from ebp.data import gen_two_sine, two_sine_tasks

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
config = T.TrainConfig(batch_size=8, lr=3e-4, sampler_lr=3e-3, sampler_steps=2, theta_dim=4,
                       spectral_norm=False, entropy_coeff=1.0, log_every=1000, iters=iters)
tasks = two_sine_tasks(500, 32, seed=0)
state = T.build_state(config, 1, "conditional", 1)
T.train(tasks, state=state)

ct, cx, _ = gen_two_sine(20, seed=12345)
x_grid = np.linspace(-2, 2, 41)
heat = T.predictive_heatmap([0.25], x_grid, ct[:, None], cx[:, None], state.model)[0]
print(f"density at t=0.25 after {iters} iterations (x: bar)")
for x, d in zip(x_grid[::2], heat[::2]):
    print(f"{x:+.1f} {'#' * int(round(60 * d / heat.max()))}")
