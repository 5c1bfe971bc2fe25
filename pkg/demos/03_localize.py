"""Monte Carlo localization against a trained map.

Shows both modes: tracking from a known start, and global localization from
a uniform particle cloud that collapses onto the true pose.  Run demo 02
first (it writes the checkpoint this demo loads); training here uses a
short budget so expect looser errors than the acceptance figures.
"""

import os

import numpy as np

from enmloc import evalio, mcl, sim
from enmloc.mcl import MclConfig

CKPT = "/tmp/tworoom_map.ckpt"
if not os.path.exists(CKPT):
    raise SystemExit("run demos/02_train_neural_map.py first")

model = evalio.load_checkpoint(CKPT)
plan = sim.make_world("tworoom")
traj = sim.generate_trajectory(plan, [(1.5, 1.5), (1.5, 4.5), (3.0, 3.0),
                                      (6.5, 3.0), (6.5, 1.5)])
keep = np.linspace(0, len(traj) - 1, 100).round().astype(int)
scans = sim.simulate_dataset(plan, [traj[i] for i in keep], sim.SensorSpec(),
                             (0.02, 0.02, 0.01, 0.01), np.random.default_rng(3))

# --- tracking: Gaussian cloud around the known start pose.  lambda=30 gives a
# sharper observation model than the soft default; the default (10) tracks fine
# but leaves more yaw spread than the convergence detector likes.
rows = mcl.run_localization(scans, model,
                            MclConfig(n_track=1000, lam=30.0, seed=0),
                            start=scans[0].gt)
err = [np.hypot(r.pose.x - s.gt.x, r.pose.y - s.gt.y) for r, s in zip(rows, scans)]
print(f"tracking: mean position error {np.mean(err):.3f} m, final {err[-1]:.3f} m")

evalio.write_trajectory(rows, "/tmp/tworoom_traj.txt")
est = evalio.read_trajectory("/tmp/tworoom_traj.txt")
report = evalio.ate_rmse(est, evalio.gt_trajectory(scans))
print(f"tracking ATE: {report.loc_rmse_cm:.1f} cm, {report.yaw_rmse_deg:.2f} deg")

# --- global: uniform cloud over the whole map, shrinks 20,000 -> 500 on convergence
cfg = MclConfig(n_init=20000, n_track=500, lam=30.0, seed=1)
rows = mcl.run_localization(scans, model, cfg)
conv = next((i for i, r in enumerate(rows) if r.converged), None)
if conv is None:
    print("global: did not converge within this short sequence "
          "(the quick demo map is coarse; the acceptance run trains longer)")
else:
    r = rows[-1]
    s = scans[-1]
    print(f"global: converged after {conv + 1} updates "
          f"({rows[0].n_particles} -> {r.n_particles} particles), "
          f"final error {np.hypot(r.pose.x - s.gt.x, r.pose.y - s.gt.y):.3f} m")
