"""Depth-based person re-identification: voxel covariance and Eigen-depth
descriptors, skeleton physique features, PCA/LDA matching with CMC
evaluation, and kernelized transfer of depth features to RGB-only data."""

__version__ = "0.1.0"
