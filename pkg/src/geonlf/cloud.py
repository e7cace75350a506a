"""Point cloud and range image containers.

Both are thin wrappers over numpy arrays; all geometry utilities treat them
as immutable values and return new instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch


@dataclass
class PointCloud:
    """Ordered set of 3D points with optional per-point intensity and normals.

    points:    (N, 3) float64
    intensity: (N,) float64 in [0, 1], or None
    normals:   (N, 3) float64 unit vectors, or None
    """

    points: np.ndarray
    intensity: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ShapeMismatch(f"points must be (N, 3), got {self.points.shape}")
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if self.intensity.shape[0] != len(self):
                raise ShapeMismatch("intensity length does not match points")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise ShapeMismatch("normals shape does not match points")

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, idx) -> "PointCloud":
        """New cloud holding rows `idx` (any numpy fancy index)."""
        return PointCloud(
            self.points[idx],
            None if self.intensity is None else self.intensity[idx],
            None if self.normals is None else self.normals[idx],
        )


@dataclass
class RangeImage:
    """H x W polar raster of one LiDAR sweep.

    depth:     (H, W) float64, metric distance from the sensor; -1.0 where invalid
    intensity: (H, W) float64 in [0, 1]; 0 where invalid
    valid:     (H, W) bool, True where the beam returned (hit and not dropped)
    """

    depth: np.ndarray
    intensity: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.ndim != 2:
            raise ShapeMismatch(f"depth must be 2D, got {self.depth.shape}")
        if self.intensity.shape != self.depth.shape or self.valid.shape != self.depth.shape:
            raise ShapeMismatch("depth/intensity/valid shapes differ")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def drop_mask(self) -> np.ndarray:
        """(H, W) float64 target for the ray-drop head: 1 where dropped."""
        return (~self.valid).astype(np.float64)
