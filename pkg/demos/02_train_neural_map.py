"""Fit the neural distance field to posed scans and check it against oracles.

Uses a reduced iteration budget so the demo finishes in about a minute; the
full default (5,000 iterations) is what the acceptance tests use.
"""

import numpy as np

from enmloc import evalio, sim, training
from enmloc import neuralmap as nm

plan = sim.make_world("tworoom")
traj = sim.generate_trajectory(plan, [(1.5, 1.5), (1.5, 4.5), (3.0, 3.0),
                                      (6.5, 3.0), (6.5, 1.5), (6.5, 3.0),
                                      (3.0, 3.0), (1.5, 1.5)])
keep = np.linspace(0, len(traj) - 1, 120).round().astype(int)
scans = sim.simulate_dataset(plan, [traj[i] for i in keep], sim.SensorSpec(),
                             rng=np.random.default_rng(0))

telemetry = []
cfg = training.TrainConfig(iterations=800, seed=1, telemetry_every=200)
model = training.train_map(scans, cfg, telemetry=telemetry)
for it, l_sdf, l_psdf, l_eik, total in telemetry:
    print(f"iter {it:4d}  sdf {l_sdf:.4f}  psdf {l_psdf:.4f}  eikonal {l_eik:.4f}  total {total:.4f}")

# compare against the brute-force oracle on points near walls
rng = np.random.default_rng(2)
pts = rng.uniform([0.2, 0.2], [7.8, 5.8], (4000, 2))
true = np.asarray(sim.true_sdf(plan, pts))
near = np.abs(true) < 0.3
dirs = np.tile([1.0, 0.0], (near.sum(), 1))
s, _, inside = nm.evaluate_points(model, pts[near], dirs)
err = np.abs(s[inside] - true[near][inside])
print(f"\nnear-wall SDF error after 800 iters: median {np.median(err):.3f} m, "
      f"90th pct {np.quantile(err, 0.9):.3f} m")

evalio.save_checkpoint(model, "/tmp/tworoom_map.ckpt")
evalio.render_sdf_image(model, model.grid.origin, model.grid.upper, 20.0,
                        "/tmp/tworoom_map.pgm")
print("wrote /tmp/tworoom_map.ckpt and /tmp/tworoom_map.pgm (plus zero-contour overlay)")
