"""Invariant checks run by ``cvp selfcheck``.

Each check draws its own random cases from a seeded generator and returns
``(passed, detail)``. Sizes are kept small so the whole suite runs in seconds.
"""
from __future__ import annotations

import tempfile
from typing import Callable

import numpy as np
from scipy.spatial.transform import Rotation

from . import affinity, geometry, grid, relevance
from .scene import CameraParams, ObjectEmbedding, SceneBundle, SceneObject, ViewData, load_scene, save_scene
from .synthetic import SyntheticSpec, make_synthetic_scene


def random_camera(rng: np.random.Generator, width: int = 64, height: int = 48) -> CameraParams:
    R = Rotation.random(random_state=rng).as_matrix()
    f = rng.uniform(20, 200, size=2)
    K = np.array([[f[0], rng.uniform(-2, 2), rng.uniform(0, width)], [0, f[1], rng.uniform(0, height)], [0, 0, 1]])
    return CameraParams(K, R, rng.uniform(-5, 5, size=3), width, height)


def numeric_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to each entry of ``array`` (modified in place, then restored)."""
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        old = array[idx]
        array[idx] = old + h
        up = f()
        array[idx] = old - h
        down = f()
        array[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


def random_head(rng: np.random.Generator, vocab_size: int = 4, D: int = 5, C: int = 4) -> affinity.AffinityHead:
    return affinity.AffinityHead(
        vocabulary=tuple(f"w{i}" for i in range(vocab_size)),
        table=rng.standard_normal((vocab_size, D)),
        W1=rng.standard_normal((D, D)),
        b1=rng.standard_normal(D),
        W2=rng.standard_normal((C, D)),
        b2=rng.standard_normal(C),
    )


def random_batch(rng: np.random.Generator, C: int, query, max_candidates: int = 8) -> affinity.ContrastiveBatch:
    m = int(rng.integers(1, max_candidates + 1))
    cands = [ObjectEmbedding(i, rng.standard_normal(C), int(rng.integers(1, 50))) for i in range(m)]
    npos = int(rng.integers(1, m + 1))
    pos = [int(i) for i in rng.choice(m, size=npos, replace=False)]
    return affinity.ContrastiveBatch(query, cands, pos, temperature=float(rng.uniform(0.2, 1.5)))


def head_gradient_error(rng: np.random.Generator) -> float:
    """Max relative error between analytic and finite-difference InfoNCE gradients."""
    head = random_head(rng)
    tokens = [f"w{i}" for i in rng.choice(len(head.vocabulary), size=2)]
    batch = random_batch(rng, head.feature_dim, tokens)
    report = affinity.infonce_grad(batch, head)
    params = {k: v.copy() for k, v in head.params().items()}

    def loss():
        h = head.with_params(**params)
        return affinity.infonce_loss(batch, affinity.query_vector(h, tokens))

    return max(relative_error(report.gradients[k], numeric_gradient(loss, params[k])) for k in params)


# --------------------------------------------------------------------------


def check_round_trip(rng):
    worst = 0.0
    for _ in range(2000):
        cam = random_camera(rng)
        u, v, d = rng.uniform(0, cam.width), rng.uniform(0, cam.height), rng.uniform(0.1, 20)
        back = geometry.project_point(cam, geometry.backproject_pixel(cam, u, v, d))
        worst = max(worst, float(np.max(np.abs(np.array(back) - [u, v, d]))))
    return worst < 1e-9, f"max error {worst:.2e}"


def check_pooling_permutation(rng):
    scene = make_synthetic_scene(SyntheticSpec(noise_sigma=0.3, rng_seed=int(rng.integers(1000))))
    cloud = geometry.aggregate_views(scene)
    perm = rng.permutation(len(cloud))
    shuffled = geometry.PointFeatureCloud(cloud.positions[perm], cloud.features[perm], cloud.source_view[perm])
    same = all(geometry.object_embedding(cloud, o) == geometry.object_embedding(shuffled, o) for o in scene.objects)
    return same, "embeddings identical under point shuffling" if same else "embedding changed"


def check_translation(rng):
    scene = make_synthetic_scene(SyntheticSpec(noise_sigma=0.1, rng_seed=int(rng.integers(1000))))
    delta = rng.integers(-5, 6, size=3).astype(float)
    views = [
        ViewData(CameraParams(v.camera.K, v.camera.R, v.camera.t - v.camera.R @ delta, v.camera.width, v.camera.height),
                 v.depth, v.features)
        for v in scene.views
    ]
    objects = [SceneObject(o.id, o.category, o.aabb_min + delta, o.aabb_max + delta) for o in scene.objects]
    moved = SceneBundle(scene.scene_id, views, objects)
    same = geometry.embed_all_objects(scene) == geometry.embed_all_objects(moved)
    return same, f"shift {delta.tolist()}"


def check_membership_monotone(rng):
    positions = rng.uniform(-2, 2, size=(2000, 3))
    cloud = geometry.PointFeatureCloud(positions, np.ones((2000, 1)), np.zeros(2000))
    for _ in range(50):
        lo = rng.uniform(-2, 1, size=3)
        box = SceneObject(0, "box", lo, lo + rng.uniform(0, 1, size=3))
        bigger = SceneObject(0, "box", box.aabb_min - rng.uniform(0, 0.5, 3), box.aabb_max + rng.uniform(0, 0.5, 3))
        if geometry.object_embedding(cloud, bigger).point_count < geometry.object_embedding(cloud, box).point_count:
            return False, "enlarged box lost points"
    return True, "50 boxes"


def check_infonce_properties(rng):
    for _ in range(200):
        C = int(rng.integers(1, 6))
        batch = random_batch(rng, C, None)
        q = rng.standard_normal(C)
        loss = affinity.infonce_loss(batch, q)
        if loss < 0:
            return False, "negative loss"
        full = affinity.ContrastiveBatch(None, batch.candidates, [c.object_id for c in batch.candidates], batch.temperature)
        if affinity.infonce_loss(full, q) != 0.0:
            return False, "all-positive loss not exactly 0"
        # shift every similarity by c via e' = e + c q / |q|^2
        c = rng.uniform(-3, 3)
        shifted = [ObjectEmbedding(e.object_id, e.vector + c * q / (q @ q), e.point_count) for e in batch.candidates]
        moved = affinity.ContrastiveBatch(None, shifted, batch.positive_ids, batch.temperature)
        if abs(affinity.infonce_loss(moved, q) - loss) > 1e-9 * max(1.0, loss):
            return False, "loss not shift invariant"
    return True, "200 batches"


def check_gradients(rng):
    worst = max(head_gradient_error(rng) for _ in range(10))
    return worst < 1e-5, f"max relative error {worst:.2e}"


def check_ranking_scale(rng):
    for _ in range(100):
        embs = [ObjectEmbedding(i, rng.standard_normal(4), 1) for i in range(int(rng.integers(1, 10)))]
        q = rng.standard_normal(4)
        s = float(rng.uniform(0.01, 100))
        a = [i for i, _ in affinity.retrieve_topk(q, embs, len(embs))]
        b = [i for i, _ in affinity.retrieve_topk(s * q, embs, len(embs))]
        if a != b:
            return False, "ranking changed under positive scaling"
    return True, "100 rankings"


def check_grid_conservation(rng):
    scene = make_synthetic_scene(SyntheticSpec(num_objects=int(rng.integers(1, 30)), rng_seed=int(rng.integers(1000))))
    for size in grid.ABLATION_SIZES:
        g = grid.build_grid(scene.objects, grid.AutoGrid(size, size))
        if g.object_count != len(scene.objects):
            return False, f"{size}x{size} lost objects"
    spec = grid.GridSpec(6, 6, (0, 6, 0, 6))
    for x, y in rng.uniform(-1e6, 1e6, size=(1000, 2)):
        r, c = grid.cell_index(x, y, spec)
        if not (0 <= r < 6 and 0 <= c < 6):
            return False, "cell index out of range"
    return True, f"{len(scene.objects)} objects at sizes {grid.ABLATION_SIZES}"


def check_relevance(rng):
    objects = [SceneObject(i, name, np.zeros(3), np.ones(3)) for i, name in enumerate(["chair", "chair", "table", "chair"])]
    scene = SceneBundle("s", (), objects)
    samples = [
        relevance.TrainingSample("scanrefer", "the chair by the table", None, [0], ["chair"]),
        relevance.TrainingSample("multi3drefer", "all chairs", None, [0, 1], ["chair", "chair"]),
        relevance.TrainingSample("scan2cap", "describe", None, [2], ["table"]),
        relevance.TrainingSample("scanqa", "what is left of the table", "chair", [0, 1], ["chair", "chair"]),
        relevance.TrainingSample("scanqa", "what is here", "chair", [0, 2], ["chair", "table"]),
        relevance.TrainingSample("sqa3d", "where am I", "chair", [], []),
    ]
    for s in samples:
        gt = relevance.build_target_set(s, scene, "gt_boxes")
        rel = relevance.build_target_set(s, scene, "all_related_boxes")
        if not set(gt.ids) <= set(s.referenced_object_ids) or not set(gt.ids) <= set(rel.ids):
            return False, f"{s.dataset_kind}: supervision not monotone"
        if s.dataset_kind == "sqa3d" and gt.mode != "skip":
            return False, "sqa3d sample not skipped"
    return True, f"{len(samples)} samples"


def check_scene_round_trip(rng):
    scene = make_synthetic_scene(SyntheticSpec(num_objects=5, noise_sigma=0.2, rng_seed=int(rng.integers(1000))))
    with tempfile.TemporaryDirectory() as tmp:
        save_scene(scene, tmp)
        same = load_scene(tmp) == scene
    return same, "load(save(scene)) == scene"


def check_training_determinism(rng):
    scenes = [make_synthetic_scene(SyntheticSpec(rng_seed=s, noise_sigma=0.05, prototype_scale=0.25)) for s in range(3)]
    samples = []
    for scene in scenes:
        for obj in scene.objects[:3]:
            samples.append(([obj.category], scene, relevance.TargetSet("positives", (obj.id,))))
    config = affinity.TrainConfig(steps=20, seed=int(rng.integers(100)))
    same = affinity.train_affinity(samples, config) == affinity.train_affinity(samples, config)
    return same, "two identical runs"


CHECKS = {
    "geometry round-trip": check_round_trip,
    "pooling permutation invariance": check_pooling_permutation,
    "translation consistency": check_translation,
    "membership monotonicity": check_membership_monotone,
    "infonce nonnegativity, zero, shift invariance": check_infonce_properties,
    "gradient fidelity": check_gradients,
    "ranking scale invariance": check_ranking_scale,
    "grid conservation and clamping": check_grid_conservation,
    "relevance supervision monotonicity": check_relevance,
    "scene save/load identity": check_scene_round_trip,
    "training determinism": check_training_determinism,
}


def run_selfcheck(seed: int = 0, out=print) -> bool:
    ok = True
    for name, check in CHECKS.items():
        rng = np.random.default_rng(seed)
        try:
            passed, detail = check(rng)
        except Exception as exc:  # noqa: BLE001
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        out(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        ok &= passed
    return ok
