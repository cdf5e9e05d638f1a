"""Uncertainty-guided BEV grid localization on synthetic worlds.

A numpy library implementing differentiable observation-to-map
association guided by perceptual uncertainty, discretized SE(2) pose
registration gated by localization uncertainty, a synthetic road-world
generator, a trainer with finite-difference gradient verification, a
Kalman-filter fusion stage, and a benchmark CLI.
"""

from .geometry import BevGrid, Pose2, Transform2, compose, inverse, warp_grid
from .worldgen import MapElement, Scenario, ScenarioSpec, VectorMap, generate_map, rasterize

__all__ = [
    "BevGrid",
    "Pose2",
    "Transform2",
    "compose",
    "inverse",
    "warp_grid",
    "MapElement",
    "Scenario",
    "ScenarioSpec",
    "VectorMap",
    "generate_map",
    "rasterize",
]

__version__ = "0.1.0"
