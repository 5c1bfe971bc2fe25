"""2D LiDAR global localization with a learned feature-grid distance field.

Subpackages:
    se2        -- poses, angle arithmetic, scan geometry
    autodiff   -- minimal reverse-mode engine and Adam
    neuralmap  -- feature grid + two-branch distance decoder
    training   -- ray sampling, losses, training loop
    mcl        -- particle filter (motion, observation, resampling)
    sim        -- segment floorplans, raycasting, ground-truth oracles
    evalio     -- dataset/checkpoint formats, trajectory metrics, rendering
    cli        -- command-line pipeline
"""

from .se2 import LidarScan, Pose2, Ray

__all__ = ["LidarScan", "Pose2", "Ray"]
__version__ = "0.1.0"
