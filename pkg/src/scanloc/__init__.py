"""LiDAR metric global localization: learned place/orientation descriptors, kd-tree
retrieval, yaw regression and planar point-to-plane ICP."""

__version__ = "0.1.0"
