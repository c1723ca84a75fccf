"""Desk-scale multi-task LiDAR perception on synthetic scenes.

Pure-numpy implementation with an in-package autodiff core: voxelization
and a learned voxel feature encoder, a sparse 3D encoder-decoder backbone,
deformable cross-space attention between voxel and BEV features, a shared
cross-task decoder for segmentation and detection queries, the full loss
stack, metrics, and a training/evaluation harness with a CLI.
"""

__version__ = "0.1.0"
