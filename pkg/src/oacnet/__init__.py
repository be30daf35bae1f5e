"""Attentive semantic alignment with offset-aware correlation kernels.

A from-scratch float64 numerical library and CLI: dense correlation volumes,
offset-indexed kernels in two provably equivalent formulations, an attention
head predicting affine or thin-plate-spline transformations, grid-distance
training on self-generated pairs, and keypoint evaluation.
"""

__version__ = "0.1.0"

from . import correlation, geometry, network, pipeline, storage, tensor  # noqa: F401
