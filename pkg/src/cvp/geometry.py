"""Depth back-projection, multi-view point aggregation and box pooling.

Pixel coordinates are zero-based; the pixel at array index ``[v, u]`` is lifted
with ``(u, v)`` as-is. A pixel with depth ``d`` maps to the world point::

    p = R^-1 (d K^-1 [u, v, 1]^T - t)
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .scene import CameraParams, ObjectEmbedding, SceneBundle, SceneObject, ValidationError, ViewData


class InvalidDepthError(ValueError):
    pass


class IllConditionedCameraError(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PointFeatureCloud:
    """World-frame points, one feature row and one source-view index per point."""

    positions: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, C)
    source_view: np.ndarray  # (N,) int

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != positions.shape[0]:
            raise ValidationError("features must be an (N, C) array aligned with positions")
        source_view = np.asarray(self.source_view, dtype=np.int64).reshape(-1)
        if source_view.shape[0] != positions.shape[0]:
            raise ValidationError("source_view must have one entry per point")
        if not np.all(np.isfinite(positions)):
            raise ValidationError("point positions must be finite")
        for name, arr in (("positions", positions), ("features", features), ("source_view", source_view)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls, feature_dim: int) -> "PointFeatureCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, feature_dim)), np.zeros(0, dtype=np.int64))


def _inverse_intrinsics(K: np.ndarray) -> np.ndarray:
    """K^-1, rejecting singular or ill-conditioned K (1-norm condition number above 1e12)."""
    return _checked_inverse(np.ascontiguousarray(K, dtype=np.float64).tobytes())


@lru_cache(maxsize=256)
def _checked_inverse(key: bytes) -> np.ndarray:
    K = np.frombuffer(key, dtype=np.float64).reshape(3, 3)
    try:
        K_inv = np.linalg.inv(K)
    except np.linalg.LinAlgError:
        raise IllConditionedCameraError("intrinsic matrix is singular") from None
    if not np.all(np.isfinite(K_inv)) or np.linalg.norm(K, 1) * np.linalg.norm(K_inv, 1) > 1e12:
        raise IllConditionedCameraError("intrinsic matrix is singular or ill-conditioned")
    K_inv.flags.writeable = False
    return K_inv


def backproject_pixel(camera: CameraParams, u: float, v: float, d: float) -> np.ndarray:
    if not d > 0:
        raise InvalidDepthError(f"depth must be positive, got {d}")
    ray = _inverse_intrinsics(camera.K) @ np.array([u, v, 1.0])
    # R is orthonormal, so R^-1 = R^T
    return camera.R.T @ (d * ray - camera.t)


def project_point(camera: CameraParams, p) -> tuple[float, float, float]:
    x_cam = camera.R @ np.asarray(p, dtype=np.float64) + camera.t
    d = x_cam[2]
    if not d > 0:
        raise BehindCameraError(f"point has camera-frame depth {d}")
    uvw = camera.K @ x_cam
    return float(uvw[0] / uvw[2]), float(uvw[1] / uvw[2]), float(d)


def backproject_view(view: ViewData, view_index: int = 0) -> PointFeatureCloud:
    """Lift every pixel with positive depth, in row-major ``(v, u)`` order."""
    cam = view.camera
    K_inv = _inverse_intrinsics(cam.K)
    vs, us = np.nonzero(view.depth > 0)
    d = view.depth[vs, us].astype(np.float64)
    pix = np.stack([us, vs, np.ones_like(us)]).astype(np.float64)  # (3, N)
    rays = K_inv @ pix
    positions = (cam.R.T @ (rays * d - cam.t[:, None])).T
    features = view.features[:, vs, us].T.astype(np.float64)
    return PointFeatureCloud(positions, features, np.full(len(d), view_index))


def aggregate_views(bundle: SceneBundle) -> PointFeatureCloud:
    """Concatenate the per-view clouds in view order. Points are not deduplicated."""
    if not bundle.views:
        return PointFeatureCloud.empty(0)
    dims = {v.feature_dim for v in bundle.views}
    if len(dims) != 1:
        raise ValidationError(f"views disagree on feature channel count: {sorted(dims)}")
    clouds = [backproject_view(v, i) for i, v in enumerate(bundle.views)]
    return PointFeatureCloud(
        np.concatenate([c.positions for c in clouds]),
        np.concatenate([c.features for c in clouds]),
        np.concatenate([c.source_view for c in clouds]),
    )


def point_in_box(p, obj: SceneObject) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return bool(np.all(obj.aabb_min <= p) and np.all(p <= obj.aabb_max))


def box_members(positions: np.ndarray, obj: SceneObject) -> np.ndarray:
    """Boolean mask of rows of ``positions`` inside the (inclusive) box."""
    positions = np.asarray(positions).reshape(-1, 3)
    return np.all((positions >= obj.aabb_min) & (positions <= obj.aabb_max), axis=1)


def _mean_rows(features: np.ndarray) -> np.ndarray:
    # fsum is exactly rounded, so the mean does not depend on point order
    n = features.shape[0]
    return np.array([math.fsum(col) / n for col in features.T.tolist()], dtype=np.float64)


def object_embedding(cloud: PointFeatureCloud, obj: SceneObject) -> ObjectEmbedding:
    mask = box_members(cloud.positions, obj)
    count = int(mask.sum())
    if count == 0:
        return ObjectEmbedding(obj.id, np.zeros(cloud.feature_dim), 0)
    return ObjectEmbedding(obj.id, _mean_rows(cloud.features[mask]), count)


def embed_all_objects(bundle: SceneBundle) -> list[ObjectEmbedding]:
    cloud = aggregate_views(bundle)
    return [object_embedding(cloud, obj) for obj in bundle.objects]
