"""Build a synthetic world, drive a robot through it, and look at the data.

The simulator is the ground-truth side of the toolkit: segment floorplans,
exact raycasting, and distance oracles that later judge the learned map.
"""

import numpy as np

from enmloc import evalio, sim

plan = sim.make_world("tworoom")
print(f"tworoom: {len(plan.segments)} wall segments, bounds {plan.bounds_lo}..{plan.bounds_hi}")

# exact distance oracles, no learning involved
center = [2.0, 3.0]
print(f"sdf at {center}: {sim.true_sdf(plan, center):.3f} m (positive = free space)")
print(f"psdf looking +x: {sim.true_psdf(plan, center, [1.0, 0.0]):.3f} m "
      "(through the doorway to the far wall)")

# a waypoint tour: turn in place, drive straight, sampled at 10 Hz
waypoints = [(1.5, 1.5), (1.5, 4.5), (3.0, 3.0), (6.5, 3.0), (6.5, 1.5)]
traj = sim.generate_trajectory(plan, waypoints)
print(f"trajectory: {len(traj)} poses over {traj[-1][0]:.1f} s")

# scans with range noise and drifting wheel odometry
spec = sim.SensorSpec()  # 1081 beams, 270 deg, 30 m, sigma 1 cm
rng = np.random.default_rng(0)
scans = sim.simulate_dataset(plan, traj, spec, (0.02, 0.02, 0.01, 0.01), rng)

drift = [np.hypot(s.gt.x - s.odom.x, s.gt.y - s.odom.y) for s in scans]
print(f"odometry drift: {drift[len(drift)//2]:.3f} m at midpoint, {drift[-1]:.3f} m at end")

evalio.write_dataset(scans, "/tmp/tworoom_scans.txt")
sim.save_floorplan(plan, "/tmp/tworoom_plan.txt")
print("wrote /tmp/tworoom_scans.txt and /tmp/tworoom_plan.txt")
