"""Pose-conditioned diffusion for articulated 3D point clouds.

Generates human-like point clouds in loose clothing from skeletal
keypoints, with training, ancestral sampling, completion and pose
editing, plus geometric evaluation and a procedural synthetic dataset.
"""

from pointfold.geometry import PointCloud, Pose, load_ply, save_ply

__all__ = ["PointCloud", "Pose", "load_ply", "save_ply"]

__version__ = "0.1.0"
