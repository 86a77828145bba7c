"""Synthetic scenes with known geometry and feature prototypes.

Objects are disjoint boxes resting on the ground plane (z = 0) of a square
room. Cameras sit above the room edge looking at its center. Depth comes from
ray casting the boxes; a hit pixel stores the depth of the midpoint between ray
entry and exit, so its back-projected point lies strictly inside the box that
produced it. Pixels that hit nothing have depth 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .relevance import TrainingSample
from .scene import CameraParams, SceneBundle, SceneObject, ViewData

CATEGORY_NAMES = (
    "chair", "table", "sofa", "bed", "cabinet", "desk", "lamp", "bookshelf",
    "toilet", "sink", "bathtub", "refrigerator", "trash can", "monitor",
    "pillow", "door", "window", "curtain", "shelf", "couch", "armchair",
    "nightstand", "dresser", "plant",
)

CELL_SIZE = 1.5  # meters of floor reserved per object slot


@dataclass(frozen=True)
class SyntheticSpec:
    num_views: int = 4
    num_objects: int = 8
    feature_dim: int = 16
    category_count: int = 8
    noise_sigma: float = 0.0
    rng_seed: int = 0
    # Prototypes depend only on this seed, so scenes generated with different
    # rng_seed values share one category -> feature mapping.
    prototype_seed: int = 0
    prototype_scale: float = 1.0  # standard deviation of each prototype entry
    image_width: int = 48
    image_height: int = 36
    focal: float = 40.0

    def __post_init__(self):
        for name in ("num_views", "num_objects", "feature_dim", "category_count", "image_width", "image_height"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.focal <= 0:
            raise ValueError("focal must be positive")


def category_names(count: int) -> list[str]:
    names = list(CATEGORY_NAMES[:count])
    names += [f"object {i}" for i in range(len(names), count)]
    return names


def category_prototypes(spec: SyntheticSpec) -> dict[str, np.ndarray]:
    """One Gaussian feature vector per category name."""
    rng = np.random.default_rng(spec.prototype_seed)
    protos = rng.standard_normal((spec.category_count, spec.feature_dim)) * spec.prototype_scale
    return dict(zip(category_names(spec.category_count), protos))


def look_at(eye, target, width: int, height: int, focal: float) -> CameraParams:
    """World->camera camera at ``eye`` looking at ``target`` (world z is up)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    K = np.array([
        [focal, 0.0, (width - 1) / 2],
        [0.0, focal, (height - 1) / 2],
        [0.0, 0.0, 1.0],
    ])
    return CameraParams(K=K, R=R, t=-R @ eye, width=width, height=height)


def _place_objects(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[list[SceneObject], float]:
    side = int(np.ceil(np.sqrt(spec.num_objects)))
    room = side * CELL_SIZE
    slots = rng.permutation(side * side)[: spec.num_objects]
    names = category_names(spec.category_count)
    objects = []
    for obj_id, slot in enumerate(slots):
        row, col = divmod(int(slot), side)
        half = rng.uniform(0.2, 0.5, size=2)
        height = rng.uniform(0.4, 1.4)
        margin = CELL_SIZE / 2 - half - 0.05
        center = (np.array([row, col]) + 0.5) * CELL_SIZE + rng.uniform(-margin, margin)
        lo = np.array([center[0] - half[0], center[1] - half[1], 0.0])
        hi = np.array([center[0] + half[0], center[1] + half[1], height])
        category = names[int(rng.integers(spec.category_count))]
        objects.append(SceneObject(obj_id, category, lo, hi))
    return objects, room


def _cameras(spec: SyntheticSpec, room: float, rng: np.random.Generator) -> list[CameraParams]:
    center = np.array([room / 2, room / 2, 0.3])
    cams = []
    for i in range(spec.num_views):
        angle = 2 * np.pi * i / spec.num_views + rng.uniform(-0.2, 0.2) + np.pi / 4
        radius = room * 0.75
        eye = center + [radius * np.cos(angle), radius * np.sin(angle), 0.0]
        eye[2] = rng.uniform(2.2, 3.2) + room * 0.3
        target = center + np.append(rng.uniform(-0.2, 0.2, size=2), 0.0)
        cams.append(look_at(eye, target, spec.image_width, spec.image_height, spec.focal))
    return cams


def render_depth(camera: CameraParams, objects) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast ``objects``; return (depth, index of the hit object or -1)."""
    h, w = camera.height, camera.width
    vs, us = np.mgrid[0:h, 0:w]
    pix = np.stack([us.ravel(), vs.ravel(), np.ones(h * w)]).astype(np.float64)
    rays_cam = np.linalg.solve(camera.K, pix)  # z component is 1, so ray parameter == depth
    dirs = (np.linalg.solve(camera.R, rays_cam)).T  # world-frame, (N, 3)
    origin = camera.center

    best_entry = np.full(h * w, np.inf)
    depth = np.zeros(h * w)
    owner = np.full(h * w, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        for k, obj in enumerate(objects):
            t0 = (obj.aabb_min - origin) * inv
            t1 = (obj.aabb_max - origin) * inv
            t_near = np.nanmax(np.minimum(t0, t1), axis=1)
            t_far = np.nanmin(np.maximum(t0, t1), axis=1)
            hit = (t_far > t_near) & (t_near > 0) & (t_near < best_entry)
            best_entry[hit] = t_near[hit]
            depth[hit] = 0.5 * (t_near[hit] + t_far[hit])
            owner[hit] = k
    return depth.reshape(h, w), owner.reshape(h, w)


def make_synthetic_scene(spec: SyntheticSpec, scene_id: str | None = None) -> SceneBundle:
    """Deterministic scene bundle for ``spec``."""
    rng = np.random.default_rng(spec.rng_seed)
    objects, room = _place_objects(spec, rng)
    cameras = _cameras(spec, room, rng)
    protos = category_prototypes(spec)
    views = []
    for cam in cameras:
        depth, owner = render_depth(cam, objects)
        features = np.zeros((spec.feature_dim, cam.height, cam.width))
        vs, us = np.nonzero(owner >= 0)
        for v, u in zip(vs, us):
            features[:, v, u] = protos[objects[owner[v, u]].category]
        if spec.noise_sigma > 0:
            noise = rng.standard_normal(features.shape) * spec.noise_sigma
            features[:, vs, us] += noise[:, vs, us]
        views.append(ViewData(cam, depth, features))
    return SceneBundle(scene_id or f"synthetic_{spec.rng_seed:04d}", views, objects)


@dataclass
class RetrievalSuite:
    train_scenes: list[SceneBundle]
    test_scenes: list[SceneBundle]
    train_samples: list[TrainingSample]
    test_samples: list[TrainingSample]

    @property
    def scenes(self) -> dict[str, SceneBundle]:
        return {s.scene_id: s for s in self.train_scenes + self.test_scenes}


def category_queries(scene: SceneBundle) -> list[TrainingSample]:
    """One "where is the <category>" sample per category present in the scene.

    Every instance of the named category is a referenced object.
    """
    by_name: dict[str, list[int]] = {}
    for obj in scene.objects:
        by_name.setdefault(obj.category, []).append(obj.id)
    return [
        TrainingSample(
            dataset_kind="multi3drefer",
            question=f"where is the {name}",
            referenced_object_ids=tuple(ids),
            referenced_object_names=(name,) * len(ids),
            scene_id=scene.scene_id,
        )
        for name, ids in sorted(by_name.items())
    ]


def make_retrieval_suite(
    num_train: int = 50,
    num_test: int = 20,
    seed: int = 0,
    min_objects: int = 8,
    max_objects: int = 24,
    **spec_kwargs,
) -> RetrievalSuite:
    """Scenes sharing one set of category prototypes, split into train and held-out."""
    rng = np.random.default_rng(seed)
    spec_kwargs.setdefault("feature_dim", 32)
    spec_kwargs.setdefault("category_count", 12)
    spec_kwargs.setdefault("noise_sigma", 0.05)
    spec_kwargs.setdefault("prototype_scale", 1.0 / np.sqrt(spec_kwargs["feature_dim"]))
    spec_kwargs.setdefault("prototype_seed", seed)
    scenes = []
    for i in range(num_train + num_test):
        spec = SyntheticSpec(
            num_objects=int(rng.integers(min_objects, max_objects + 1)),
            rng_seed=int(rng.integers(2**31)),
            **spec_kwargs,
        )
        scenes.append(make_synthetic_scene(spec, scene_id=f"scene{i:04d}"))
    train, test = scenes[:num_train], scenes[num_train:]
    return RetrievalSuite(
        train, test,
        [q for s in train for q in category_queries(s)],
        [q for s in test for q in category_queries(s)],
    )
