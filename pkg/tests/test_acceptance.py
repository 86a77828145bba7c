"""Acceptance criteria, one test each. Every test records a PASS/FAIL line that
is printed in the pytest terminal summary."""
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from cvp import affinity, geometry, grid, relevance
from cvp.cli import run
from cvp.scene import ObjectEmbedding, load_scene
from cvp.synthetic import SyntheticSpec, make_synthetic_scene

import conftest
from conftest import DATA, make_camera


def record(number, title, passed, detail):
    conftest.ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
    assert passed, detail


# 1 -------------------------------------------------------------------------


def test_geometry_round_trip():
    rng = np.random.default_rng(0)
    cameras = [make_camera(rng) for _ in range(1000)]
    pixels = np.column_stack([rng.uniform(0, 64, 100_000), rng.uniform(0, 48, 100_000), rng.uniform(0.05, 50, 100_000)])
    worst = 0.0
    start = time.perf_counter()
    for i, (u, v, d) in enumerate(pixels):
        cam = cameras[i // 100]
        back = geometry.project_point(cam, geometry.backproject_pixel(cam, u, v, d))
        worst = max(worst, abs(back[0] - u), abs(back[1] - v), abs(back[2] - d))
    elapsed = time.perf_counter() - start
    record(1, "geometry round-trip", worst < 1e-9 and elapsed < 5.0,
           f"1e5 triples, max error {worst:.2e} (< 1e-9), {elapsed:.2f}s (< 5s)")


# 2 -------------------------------------------------------------------------


def _oracle(scores, positive):
    with mpmath.workdps(50):
        s = [mpmath.mpf(float(x)) for x in scores]
        num = mpmath.fsum(mpmath.exp(x) for x, p in zip(s, positive) if p)
        den = mpmath.fsum(mpmath.exp(x) for x in s)
        return -mpmath.log(num / den)


def test_infonce_oracle_equivalence():
    rng = np.random.default_rng(1)
    worst = worst_ce = 0.0
    zero_ok = True
    for _ in range(1000):
        m, C = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        cands = [ObjectEmbedding(i, rng.standard_normal(C), 1) for i in range(m)]
        q = rng.standard_normal(C)
        tau = float(rng.uniform(0.05, 2.0))
        scores = [float(c.vector @ q) / tau for c in cands]

        pos = [int(i) for i in rng.choice(m, size=int(rng.integers(1, m + 1)), replace=False)]
        got = affinity.infonce_loss(affinity.ContrastiveBatch(None, cands, pos, tau), q)
        want = _oracle(scores, [i in pos for i in range(m)])
        if len(pos) == m:
            zero_ok &= got == 0.0
        else:
            worst = max(worst, float(abs(got - want) / abs(want)))

        # single positive: softmax cross-entropy -log softmax(scores)[p]
        p = int(rng.integers(m))
        got = affinity.infonce_loss(affinity.ContrastiveBatch(None, cands, [p], tau), q)
        with mpmath.workdps(50):
            logits = [mpmath.mpf(s) for s in scores]
            ce = mpmath.log(mpmath.fsum(mpmath.exp(s) for s in logits)) - logits[p]
        if m == 1:
            zero_ok &= got == 0.0
        else:
            worst_ce = max(worst_ce, float(abs(got - ce) / abs(ce)))

        everything = affinity.ContrastiveBatch(None, cands, list(range(m)), tau)
        zero_ok &= affinity.infonce_loss(everything, q) == 0.0

    passed = worst < 1e-12 and worst_ce < 1e-12 and zero_ok
    record(2, "InfoNCE oracle equivalence", passed,
           f"1000 batches, rel error {worst:.1e}, cross-entropy rel error {worst_ce:.1e} (< 1e-12), "
           f"E+=E exactly 0: {zero_ok}")


# 3 -------------------------------------------------------------------------


def _central_difference(f, array, h=1e-5):
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


def _relative_error(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def test_gradient_fidelity():
    rng = np.random.default_rng(2)
    worst = 0.0
    start = time.perf_counter()
    for _ in range(100):
        V, D, H, C = (int(x) for x in rng.integers(2, 7, size=4))
        head = affinity.AffinityHead(
            tuple(f"w{i}" for i in range(V)), rng.standard_normal((V, D)),
            rng.standard_normal((H, D)), rng.standard_normal(H), rng.standard_normal((C, H)), rng.standard_normal(C),
        )
        m = int(rng.integers(1, 9))
        cands = [ObjectEmbedding(i, rng.standard_normal(C), 1) for i in range(m)]
        pos = [int(i) for i in rng.choice(m, size=int(rng.integers(1, m + 1)), replace=False)]
        tokens = [f"w{i}" for i in rng.choice(V, size=int(rng.integers(1, 4)))]
        batch = affinity.ContrastiveBatch(tokens, cands, pos, float(rng.uniform(0.2, 1.5)))
        analytic = affinity.infonce_grad(batch, head).gradients
        params = {k: v.copy() for k, v in head.params().items()}
        loss = lambda: affinity.infonce_loss(batch, affinity.query_vector(head.with_params(**params), tokens))
        for name, value in params.items():
            worst = max(worst, _relative_error(analytic[name], _central_difference(loss, value)))
    elapsed = time.perf_counter() - start
    record(3, "gradient fidelity", worst < 1e-5 and elapsed < 30.0,
           f"100 heads, max relative error {worst:.1e} (< 1e-5), {elapsed:.2f}s (< 30s)")


# 4 -------------------------------------------------------------------------


GOLDEN = [
    ("golden_empty", "empty_6x6.txt", grid.GridSpec(6, 6, (0.0, 6.0, 0.0, 6.0))),
    ("golden_single", "single_6x6.txt", grid.GridSpec(6, 6, (0.0, 6.0, 0.0, 6.0))),
    ("golden_multi", "multi_6x6.txt", grid.AutoGrid(6, 6)),
]


def test_prompt_byte_exactness():
    mismatched = []
    for scene, golden, spec in GOLDEN:
        objects = load_scene(DATA / "scenes" / scene).objects
        text = grid.serialize_grid(grid.build_grid(objects, spec))
        if text.encode("utf-8") != (DATA / "golden" / golden).read_bytes():
            mismatched.append(golden)
    record(4, "prompt byte-exactness", not mismatched,
           f"3 golden prompts, mismatches: {mismatched or 'none'}")


# 5 -------------------------------------------------------------------------


def test_grid_conservation():
    scenes = [load_scene(DATA / "scenes" / name).objects for name in ("golden_single", "golden_multi")]
    scenes += [load_scene(DATA / "relevance" / "scenes" / "room0").objects]
    scenes += [make_synthetic_scene(SyntheticSpec(num_objects=n, rng_seed=n)).objects for n in (1, 5, 12, 30, 60)]
    failures = []
    for i, objects in enumerate(scenes):
        for size in grid.ABLATION_SIZES:
            g = grid.build_grid(objects, grid.AutoGrid(size, size))
            if sum(len(names) for names in g.cells.values()) != len(objects):
                failures.append((i, size))
    record(5, "grid conservation", not failures,
           f"{len(scenes)} scenes x sizes {grid.ABLATION_SIZES}, failures: {failures or 'none'}")


# 6 -------------------------------------------------------------------------


RETRIEVAL_SCRIPT = """
import json, time
from cvp import affinity, relevance
from cvp.synthetic import make_retrieval_suite

start = time.perf_counter()
suite = make_retrieval_suite(num_train=50, num_test=20, seed=0)
scenes = suite.scenes
def triples(samples):
    return [(relevance.tokenize(s.question), scenes[s.scene_id],
             relevance.build_target_set(s, scenes[s.scene_id])) for s in samples]
train, test = triples(suite.train_samples), triples(suite.test_samples)
cache = affinity.EmbeddingCache()
result = {}
for kind in ("infonce", "mse"):
    config = affinity.TrainConfig(lr=0.05, steps=2000, tau=0.07, seed=0, loss_kind=kind)
    head = affinity.train_affinity(train, config, cache=cache)
    result[kind] = affinity.retrieval_accuracy(head, test, k=1, cache=cache)
result["queries"] = len(test)
result["elapsed"] = time.perf_counter() - start
print(json.dumps(result))
"""


def test_synthetic_retrieval_end_to_end():
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    proc = subprocess.run([sys.executable, "-c", RETRIEVAL_SCRIPT], env=env, capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stderr
    r = json.loads(proc.stdout)
    passed = r["infonce"] >= 0.95 and r["mse"] >= 0.80 and r["elapsed"] < 60.0
    record(6, "synthetic retrieval", passed,
           f"held-out top-1 infonce {r['infonce']:.3f} (>= 0.95), mse {r['mse']:.3f} (>= 0.80) "
           f"on {r['queries']} queries, {r['elapsed']:.1f}s single-threaded (< 60s)")


# 7 -------------------------------------------------------------------------


def _read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


def test_relevance_rules():
    base = DATA / "relevance"
    samples = relevance.read_samples(base / "samples.jsonl")
    scene = load_scene(base / "scenes" / "room0")
    kinds = {s.dataset_kind for s in samples}
    problems = []
    results = {}
    for variant in relevance.VARIANTS:
        expected = _read_jsonl(base / f"expected_{variant}.jsonl")
        got = [relevance.build_target_set(s, scene, variant) for s in samples]
        results[variant] = got
        for i, (g, e) in enumerate(zip(got, expected)):
            if g.to_json() != {"mode": e["mode"], "ids": e["ids"]}:
                problems.append(f"{variant} line {i + 1}")
    for i, (gt, rel) in enumerate(zip(*results.values())):
        if gt.mode != rel.mode or not set(gt.ids) <= set(rel.ids):
            problems.append(f"line {i + 1} not a superset")
    scanqa_modes = {t.mode for s, t in zip(samples, results["gt_boxes"]) if s.dataset_kind == "scanqa"}
    if kinds != set(relevance.DATASET_KINDS) or scanqa_modes != {"positives", "skip"}:
        problems.append("fixture does not cover every branch")
    record(7, "relevance rules", not problems,
           f"{len(samples)} fixture samples, both variants, problems: {problems or 'none'}")


# 8 -------------------------------------------------------------------------


def _cli_session():
    data = DATA / "relevance"
    golden = DATA / "scenes" / "golden_multi"
    steps = [
        ["gen-scene", "--out", "scene", "--objects", "6", "--noise", "0.1", "--seed", "4"],
        ["gen-scene", "--out", "suite", "--suite", "6", "--heldout", "2", "--seed", "4"],
        ["backproject", "--scene", "scene", "--out", "cloud"],
        ["embed-objects", "--scene", "scene", "--out", "embeddings.json"],
        ["embed-objects", "--scene", "scene"],
        ["build-grid", "--scene", str(golden), "--out", "grid.txt"],
        ["build-grid", "--scene", "scene"],
        ["build-targets", "--samples", str(data / "samples.jsonl"), "--scene-root", str(data / "scenes"),
         "--variant", "all_related_boxes", "--out", "targets.jsonl"],
        ["train-affinity", "--data", "suite", "--steps", "50", "--seed", "4", "--out", "head.cvpt"],
        ["train-affinity", "--data", "suite", "--steps", "50", "--seed", "4", "--loss", "mse", "--out", "head_mse.cvpt"],
        ["retrieve", "--scene", "suite/scenes/scene0006", "--head", "head.cvpt", "--query", "where is the chair",
         "--k", "3", "--csv", "ranks.csv"],
        ["ablate-grid", "--scene", "scene", "--out", "ablation"],
        ["selfcheck", "--seed", "4"],
    ]
    return steps


def _snapshot(root: Path) -> dict:
    files = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        key = path.relative_to(root).as_posix()
        if path.name == "run_manifest.json" or path.name.endswith(".run.json"):
            doc = json.loads(path.read_text())
            assert doc.pop("duration_s") >= 0
            files[key] = doc
        else:
            files[key] = path.read_bytes()
    return files


def test_cli_determinism(tmp_path, monkeypatch, capfd):
    runs = []
    for name in ("a", "b"):
        work = tmp_path / name
        work.mkdir()
        monkeypatch.chdir(work)
        codes, stdout = [], []
        for argv in _cli_session():
            codes.append(run(argv))
            stdout.append(capfd.readouterr().out)
        runs.append((codes, stdout, _snapshot(work)))
    (codes_a, out_a, files_a), (codes_b, out_b, files_b) = runs
    differing = sorted(k for k in files_a.keys() | files_b.keys() if files_a.get(k) != files_b.get(k))
    differing += [" ".join(argv[:1]) + " stdout" for argv, x, y in zip(_cli_session(), out_a, out_b) if x != y]
    commands = sorted({argv[0] for argv in _cli_session()})
    passed = codes_a == codes_b == [0] * len(codes_a) and not differing
    record(8, "CLI determinism", passed,
           f"{len(commands)} commands run twice, {len(files_a)} output files compared, "
           f"differences: {differing or 'none'}")
