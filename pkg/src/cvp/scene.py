"""Scene domain types, validation and on-disk scene directories.

A scene directory holds ``scene.json`` plus one depth and one feature tensor
per view (see :mod:`cvp.tensorfile`). Extrinsics map world to camera:
``x_cam = R @ x_world + t``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .tensorfile import TensorFormatError, read_tensor, write_tensor

ORTHONORMAL_TOL = 1e-6


class SceneError(Exception):
    """Base class for scene ingestion problems."""


class SchemaError(SceneError):
    """Malformed ``scene.json``; ``field`` is a dotted path to the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ValidationError(SceneError):
    """A domain invariant does not hold."""


# TensorFormatError is re-exported so callers can catch every ingestion failure from here.
__all__ = [
    "CameraParams", "ViewData", "SceneObject", "SceneBundle", "ObjectEmbedding",
    "SceneError", "SchemaError", "ValidationError", "TensorFormatError",
    "load_scene", "save_scene",
]


def _as_matrix(value, shape, name) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.shape != shape:
        raise ValidationError(f"{name} must have shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CameraParams:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "K", _as_matrix(self.K, (3, 3), "K"))
        object.__setattr__(self, "R", _as_matrix(self.R, (3, 3), "R"))
        object.__setattr__(self, "t", _as_matrix(self.t, (3,), "t"))
        self.validate()

    def validate(self) -> None:
        K, R = self.K, self.R
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(R)) and np.all(np.isfinite(self.t))):
            raise ValidationError("camera parameters must be finite")
        if K[2, 2] != 1.0:
            raise ValidationError("intrinsics not normalized: K[2][2] must equal 1")
        if abs(np.linalg.det(K)) == 0.0 or np.linalg.cond(K) > 1e12:
            raise ValidationError("intrinsics not invertible")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValidationError("rotation not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ValidationError("rotation not proper: det(R) must be +1")
        for name in ("width", "height"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value <= 0:
                raise ValidationError(f"image {name} must be a positive integer")

    def __eq__(self, other):
        if not isinstance(other, CameraParams):
            return NotImplemented
        return (
            np.array_equal(self.K, other.K)
            and np.array_equal(self.R, other.R)
            and np.array_equal(self.t, other.t)
            and self.width == other.width
            and self.height == other.height
        )

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -np.linalg.solve(self.R, self.t)


@dataclass(frozen=True, eq=False)
class ViewData:
    camera: CameraParams
    depth: np.ndarray  # (H', W'), meters, 0 = invalid
    features: np.ndarray  # (C, H', W')

    def __post_init__(self):
        depth = np.array(self.depth)
        features = np.array(self.features)
        depth.setflags(write=False)
        features.setflags(write=False)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "features", features)
        self.validate()

    def validate(self) -> None:
        if self.depth.ndim != 2:
            raise ValidationError("depth map must be 2-dimensional")
        if self.features.ndim != 3:
            raise ValidationError("feature map must be 3-dimensional (C, H, W)")
        if self.features.shape[1:] != self.depth.shape:
            raise ValidationError(
                f"depth and feature spatial dims disagree: {self.depth.shape} vs {self.features.shape[1:]}"
            )
        if self.depth.shape != (self.camera.height, self.camera.width):
            raise ValidationError("depth dims must equal (camera.height, camera.width)")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise ValidationError("depth entries must be finite and nonnegative")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ViewData):
            return NotImplemented
        return (
            self.camera == other.camera
            and self.depth.dtype == other.depth.dtype
            and self.features.dtype == other.features.dtype
            and np.array_equal(self.depth, other.depth)
            and np.array_equal(self.features, other.features)
        )


@dataclass(frozen=True, eq=False)
class SceneObject:
    id: int
    category: str
    aabb_min: np.ndarray
    aabb_max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "aabb_min", _as_matrix(self.aabb_min, (3,), "aabb_min"))
        object.__setattr__(self, "aabb_max", _as_matrix(self.aabb_max, (3,), "aabb_max"))
        if isinstance(self.id, bool) or not isinstance(self.id, (int, np.integer)) or self.id < 0:
            raise ValidationError(f"object id must be a nonnegative integer, got {self.id!r}")
        object.__setattr__(self, "id", int(self.id))
        if not isinstance(self.category, str) or not self.category:
            raise ValidationError(f"object {self.id}: category must be a nonempty string")
        if np.any(self.aabb_min > self.aabb_max):
            raise ValidationError(f"object {self.id}: aabb_min must be <= aabb_max componentwise")

    @property
    def center(self) -> np.ndarray:
        return (self.aabb_min + self.aabb_max) / 2

    def __eq__(self, other):
        if not isinstance(other, SceneObject):
            return NotImplemented
        return (
            self.id == other.id
            and self.category == other.category
            and np.array_equal(self.aabb_min, other.aabb_min)
            and np.array_equal(self.aabb_max, other.aabb_max)
        )


@dataclass(frozen=True)
class SceneBundle:
    scene_id: str
    views: tuple[ViewData, ...] = ()
    objects: tuple[SceneObject, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        object.__setattr__(self, "objects", tuple(self.objects))
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValidationError("object ids must be unique")
        dims = {v.feature_dim for v in self.views}
        if len(dims) > 1:
            raise ValidationError(f"views disagree on feature channel count: {sorted(dims)}")

    @property
    def feature_dim(self) -> int | None:
        return self.views[0].feature_dim if self.views else None

    def object_by_id(self, object_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(object_id)


@dataclass(frozen=True, eq=False)
class ObjectEmbedding:
    object_id: int
    vector: np.ndarray
    point_count: int = 0

    def __post_init__(self):
        vector = np.array(self.vector, dtype=np.float64)
        vector.setflags(write=False)
        object.__setattr__(self, "vector", vector)
        if self.point_count < 0:
            raise ValidationError("point_count must be nonnegative")
        if self.point_count == 0 and np.any(vector != 0):
            raise ValidationError("an object with no points must carry the all-zero sentinel")

    @property
    def is_empty(self) -> bool:
        return self.point_count == 0

    def __eq__(self, other):
        if not isinstance(other, ObjectEmbedding):
            return NotImplemented
        return (
            self.object_id == other.object_id
            and self.point_count == other.point_count
            and np.array_equal(self.vector, other.vector)
        )


# --------------------------------------------------------------------------
# scene.json parsing


def _require(mapping: Any, key: str, path: str):
    if not isinstance(mapping, dict):
        raise SchemaError(path, "expected an object")
    if key not in mapping:
        raise SchemaError(f"{path}.{key}", "missing field")
    return mapping[key]


def _reals(value: Any, n: int, path: str) -> list[float]:
    if not isinstance(value, list) or len(value) != n:
        raise SchemaError(path, f"expected a list of {n} numbers")
    for i, x in enumerate(value):
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise SchemaError(f"{path}[{i}]", "expected a number")
    return [float(x) for x in value]


def _integer(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(path, "expected an integer")
    return value


def _string(value: Any, path: str) -> str:
    if not isinstance(value, str):
        raise SchemaError(path, "expected a string")
    return value


def load_scene(path) -> SceneBundle:
    """Load and validate a scene directory."""
    root = Path(path)
    try:
        doc = json.loads((root / "scene.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError("scene.json", f"invalid JSON: {exc}") from exc

    scene_id = _string(_require(doc, "scene_id", "scene"), "scene.scene_id")
    raw_views = _require(doc, "views", "scene")
    raw_objects = _require(doc, "objects", "scene")
    if not isinstance(raw_views, list):
        raise SchemaError("scene.views", "expected a list")
    if not isinstance(raw_objects, list):
        raise SchemaError("scene.objects", "expected a list")

    views = []
    for i, rv in enumerate(raw_views):
        p = f"scene.views[{i}]"
        camera = CameraParams(
            K=np.reshape(_reals(_require(rv, "K", p), 9, f"{p}.K"), (3, 3)),
            R=np.reshape(_reals(_require(rv, "R", p), 9, f"{p}.R"), (3, 3)),
            t=_reals(_require(rv, "t", p), 3, f"{p}.t"),
            width=_integer(_require(rv, "width", p), f"{p}.width"),
            height=_integer(_require(rv, "height", p), f"{p}.height"),
        )
        depth = read_tensor(root / _string(_require(rv, "depth_file", p), f"{p}.depth_file"), 2)
        feats = read_tensor(root / _string(_require(rv, "feature_file", p), f"{p}.feature_file"), 3)
        views.append(ViewData(camera, depth, feats))

    objects = []
    for i, ro in enumerate(raw_objects):
        p = f"scene.objects[{i}]"
        objects.append(
            SceneObject(
                id=_integer(_require(ro, "id", p), f"{p}.id"),
                category=_string(_require(ro, "category", p), f"{p}.category"),
                aabb_min=_reals(_require(ro, "aabb_min", p), 3, f"{p}.aabb_min"),
                aabb_max=_reals(_require(ro, "aabb_max", p), 3, f"{p}.aabb_max"),
            )
        )
    return SceneBundle(scene_id, views, objects)


def _floats(arr: np.ndarray) -> list[float]:
    return [float(x) for x in np.asarray(arr).ravel()]


def scene_document(bundle: SceneBundle) -> dict:
    """The ``scene.json`` content for ``bundle``, with the tensor file names it references."""
    views = []
    for i, view in enumerate(bundle.views):
        cam = view.camera
        views.append({
            "K": _floats(cam.K),
            "R": _floats(cam.R),
            "t": _floats(cam.t),
            "width": int(cam.width),
            "height": int(cam.height),
            "depth_file": f"view_{i:03d}_depth.cvpt",
            "feature_file": f"view_{i:03d}_features.cvpt",
        })
    objects = [
        {
            "id": obj.id,
            "category": obj.category,
            "aabb_min": _floats(obj.aabb_min),
            "aabb_max": _floats(obj.aabb_max),
        }
        for obj in bundle.objects
    ]
    return {"scene_id": bundle.scene_id, "views": views, "objects": objects}


def save_scene(bundle: SceneBundle, path) -> None:
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        doc = scene_document(bundle)
        for view, entry in zip(bundle.views, doc["views"]):
            write_tensor(root / entry["depth_file"], view.depth)
            write_tensor(root / entry["feature_file"], view.features)
        text = json.dumps(doc, indent=2, ensure_ascii=False) + "\n"
        (root / "scene.json").write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed to save scene to {root}: {exc}") from exc
