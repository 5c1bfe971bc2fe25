import hashlib
import os
from pathlib import Path

import numpy as np
import pytest

from enmloc import evalio, sim, training
from enmloc.cli import _TOURS

CACHE_DIR = Path(__file__).parent / "_cache"
CACHE_DIR.mkdir(exist_ok=True)


def finite_diff(f, x, h=1e-5):
    """Central finite differences of a scalar function over a flat array view."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        lp = f()
        flat[k] = old - h
        lm = f()
        flat[k] = old
        gf[k] = (lp - lm) / (2 * h)
    return g


def make_dataset(world: str, n_frames: int, seed: int, odom_noise=(0.0, 0.0, 0.0, 0.0),
                 spec: sim.SensorSpec = None):
    plan = sim.make_world(world)
    spec = spec or sim.SensorSpec()
    traj = sim.generate_trajectory(plan, _TOURS[world])
    if n_frames < len(traj):
        keep = np.linspace(0, len(traj) - 1, n_frames).round().astype(int)
        traj = [traj[i] for i in keep]
    rng = np.random.default_rng(seed)
    return plan, sim.simulate_dataset(plan, traj, spec, odom_noise, rng)


def cached_model(world: str, n_frames: int, data_seed: int, cfg: training.TrainConfig):
    """Train (or reload) a map for a built-in world; returns (plan, scans, model, seconds)."""
    import json
    import time

    key = json.dumps([world, n_frames, data_seed, vars(cfg)], sort_keys=True, default=str)
    digest = hashlib.sha256(key.encode()).hexdigest()[:16]
    ckpt = CACHE_DIR / f"{world}_{digest}.ckpt"
    meta = CACHE_DIR / f"{world}_{digest}.seconds"
    plan, scans = make_dataset(world, n_frames, data_seed)
    if ckpt.exists():
        return plan, scans, evalio.load_checkpoint(ckpt), float(meta.read_text())
    t0 = time.time()
    model = training.train_map(scans, cfg)
    seconds = time.time() - t0
    evalio.save_checkpoint(model, ckpt)
    meta.write_text(str(seconds))
    return plan, scans, evalio.load_checkpoint(ckpt), seconds


@pytest.fixture(scope="session")
def tworoom_trained():
    cfg = training.TrainConfig(seed=1)
    return cached_model("tworoom", 200, 0, cfg)


@pytest.fixture(scope="session")
def corridor_trained():
    cfg = training.TrainConfig(seed=1)
    return cached_model("corridor_offices", 400, 0, cfg)
