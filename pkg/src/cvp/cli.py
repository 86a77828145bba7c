"""Command-line entry point: ``cvp <command> [options]``.

Exit codes: 0 success, 1 runtime error, 2 usage error. Set ``CVP_LOG`` to
``error``, ``info`` or ``debug`` for verbosity. Commands that write files also
write a run manifest (``<out>.run.json`` for a file, ``<dir>/run_manifest.json``
for a directory).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import affinity, geometry, grid, relevance
from .scene import load_scene, save_scene
from .synthetic import SyntheticSpec, make_retrieval_suite, make_synthetic_scene
from .tensorfile import write_tensor

log = logging.getLogger("cvp")

COMMANDS = (
    "gen-scene", "backproject", "embed-objects", "build-grid", "build-targets",
    "train-affinity", "retrieve", "ablate-grid", "selfcheck",
)
RUN_MANIFEST = "run_manifest.json"
_TOKEN = re.compile(r"\w+|[^\w\s]")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# run manifests


def _is_manifest(path: Path) -> bool:
    return path.name == RUN_MANIFEST or path.name.endswith(".run.json")


def content_hash(path) -> str:
    """sha256 of a file, or of every non-manifest file under a directory."""
    path = Path(path)
    digest = hashlib.sha256()
    if path.is_dir():
        for child in sorted(p for p in path.rglob("*") if p.is_file() and not _is_manifest(p)):
            digest.update(child.relative_to(path).as_posix().encode())
            digest.update(b"\0")
            digest.update(child.read_bytes())
    else:
        digest.update(path.read_bytes())
    return digest.hexdigest()


class RunRecorder:
    def __init__(self, command: str, config: dict):
        self.command = command
        self.config = config
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.start = time.perf_counter()

    def input(self, path) -> Path:
        path = Path(path)
        self.inputs[str(path)] = content_hash(path)
        return path

    def output(self, path) -> Path:
        self.outputs.append(str(path))
        return Path(path)

    def write(self, target: Path) -> None:
        missing = [p for p in self.outputs if not Path(p).exists()]
        if missing:
            raise RuntimeError(f"declared outputs were not written: {missing}")
        doc = {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "duration_s": time.perf_counter() - self.start,
        }
        target.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest_path(out: Path) -> Path:
    return out / RUN_MANIFEST if out.is_dir() else out.with_name(out.name + ".run.json")


# --------------------------------------------------------------------------
# commands


def cmd_gen_scene(args, rec: RunRecorder) -> int:
    out = Path(args.out)
    if args.suite:
        suite = make_retrieval_suite(num_train=args.suite, num_test=args.heldout, seed=args.seed)
        for scene in suite.train_scenes + suite.test_scenes:
            save_scene(scene, out / "scenes" / scene.scene_id)
        relevance.write_samples(suite.train_samples, out / "samples.jsonl")
        relevance.write_samples(suite.test_samples, out / "heldout.jsonl")
        for name in ("scenes", "samples.jsonl", "heldout.jsonl"):
            rec.output(out / name)
    else:
        spec = SyntheticSpec(
            num_views=args.views,
            num_objects=args.objects,
            feature_dim=args.feature_dim,
            category_count=args.categories,
            noise_sigma=args.noise,
            rng_seed=args.seed,
        )
        save_scene(make_synthetic_scene(spec), out)
        rec.output(out / "scene.json")
    rec.write(out / RUN_MANIFEST)
    return 0


def cmd_backproject(args, rec: RunRecorder) -> int:
    bundle = load_scene(rec.input(args.scene))
    cloud = geometry.aggregate_views(bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(rec.output(out / "positions.cvpt"), cloud.positions)
    write_tensor(rec.output(out / "features.cvpt"), cloud.features)
    write_tensor(rec.output(out / "source_view.cvpt"), cloud.source_view.astype(np.float64))
    print(f"{len(cloud)} points, feature dim {cloud.feature_dim}")
    rec.write(out / RUN_MANIFEST)
    return 0


def cmd_embed_objects(args, rec: RunRecorder) -> int:
    bundle = load_scene(rec.input(args.scene))
    embs = geometry.embed_all_objects(bundle)
    doc = {
        "scene_id": bundle.scene_id,
        "embeddings": [
            {
                "object_id": e.object_id,
                "category": bundle.object_by_id(e.object_id).category,
                "point_count": e.point_count,
                "vector": [float(x) for x in e.vector],
            }
            for e in embs
        ],
    }
    _emit(json.dumps(doc, indent=2) + "\n", args.out, rec)
    return 0


def _parse_bounds(text: str) -> tuple[float, float, float, float]:
    try:
        values = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--bounds expects x0,x1,y0,y1, got {text!r}") from None
    if len(values) != 4:
        raise UsageError(f"--bounds expects four comma-separated numbers, got {text!r}")
    return values


def _grid_spec(args, rows: int, cols: int):
    if args.bounds:
        return grid.GridSpec(rows, cols, _parse_bounds(args.bounds))
    return grid.AutoGrid(rows, cols)


def cmd_build_grid(args, rec: RunRecorder) -> int:
    bundle = load_scene(rec.input(args.scene))
    g = grid.build_grid(bundle.objects, _grid_spec(args, args.rows, args.cols))
    _emit(grid.serialize_grid(g), args.out, rec)
    return 0


def count_tokens(text: str) -> int:
    """Word and punctuation tokens; a rough prompt-length measure."""
    return len(_TOKEN.findall(text))


def cmd_ablate_grid(args, rec: RunRecorder) -> int:
    bundle = load_scene(rec.input(args.scene))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["rows", "cols", "token_count", "cell_lines", "object_mentions", "prompt_file"])
    for size in args.sizes:
        g = grid.build_grid(bundle.objects, _grid_spec(args, size, size))
        text = grid.serialize_grid(g)
        name = f"grid_{size}x{size}.txt"
        rec.output(out / name).write_text(text, encoding="utf-8")
        writer.writerow([size, size, count_tokens(text), len(g.cells), g.object_count, name])
    rec.output(out / "token_counts.csv").write_text(buf.getvalue(), encoding="utf-8")
    rec.write(out / RUN_MANIFEST)
    return 0


def _scene_loader(root: Path):
    cache = {}

    def get(scene_id: str):
        if scene_id is None:
            raise ValueError("sample has no scene_id")
        if scene_id not in cache:
            cache[scene_id] = load_scene(root / scene_id)
        return cache[scene_id]

    return get


def cmd_build_targets(args, rec: RunRecorder) -> int:
    samples = relevance.read_samples(rec.input(args.samples))
    get_scene = _scene_loader(rec.input(args.scene_root))
    lines = []
    for sample in samples:
        target = relevance.build_target_set(sample, get_scene(sample.scene_id), args.variant)
        lines.append(json.dumps({"scene_id": sample.scene_id, **target.to_json()}) + "\n")
    _emit("".join(lines), args.out, rec)
    return 0


def _training_triples(samples, get_scene, variant):
    return [
        (relevance.tokenize(s.question), get_scene(s.scene_id),
         relevance.build_target_set(s, get_scene(s.scene_id), variant))
        for s in samples
    ]


def cmd_train_affinity(args, rec: RunRecorder) -> int:
    data = rec.input(args.data)
    get_scene = _scene_loader(data / "scenes")
    samples = relevance.read_samples(data / args.samples)
    triples = _training_triples(samples, get_scene, args.variant)
    config = affinity.TrainConfig(lr=args.lr, steps=args.steps, tau=args.tau, seed=args.seed, loss_kind=args.loss)
    cache = affinity.EmbeddingCache()
    head = affinity.train_affinity(triples, config, cache=cache)
    out = Path(args.out)
    affinity.save_head(head, out)
    rec.output(out / "manifest.json")
    print(f"train top-1 accuracy: {affinity.retrieval_accuracy(head, triples, cache=cache):.4f}")
    heldout = data / "heldout.jsonl"
    if heldout.exists():
        test = _training_triples(relevance.read_samples(heldout), get_scene, "gt_boxes")
        print(f"held-out top-1 accuracy: {affinity.retrieval_accuracy(head, test, cache=cache):.4f}")
    rec.write(out / RUN_MANIFEST)
    return 0


def cmd_retrieve(args, rec: RunRecorder) -> int:
    bundle = load_scene(rec.input(args.scene))
    head = affinity.load_head(rec.input(args.head))
    embs = [e for e in geometry.embed_all_objects(bundle) if not e.is_empty]
    q = affinity.query_vector(head, args.query)
    ranked = affinity.retrieve_topk(q, embs, args.k)
    for rank, (obj_id, sim) in enumerate(ranked, 1):
        print(f"{rank}\t{obj_id}\t{bundle.object_by_id(obj_id).category}\t{sim:.6f}")
    if args.csv:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["rank", "object_id", "category", "similarity"])
        for rank, (obj_id, sim) in enumerate(ranked, 1):
            writer.writerow([rank, obj_id, bundle.object_by_id(obj_id).category, repr(sim)])
        out = rec.output(Path(args.csv))
        out.write_text(buf.getvalue(), encoding="utf-8")
        rec.write(_manifest_path(out))
    return 0


def cmd_selfcheck(args, rec: RunRecorder) -> int:
    from .selfcheck import run_selfcheck

    return 0 if run_selfcheck(seed=args.seed) else 1


def _emit(text: str, out: str | None, rec: RunRecorder) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    path = rec.output(Path(out))
    path.write_text(text, encoding="utf-8")
    rec.write(_manifest_path(path))


# --------------------------------------------------------------------------
# parser


def _sizes(text: str) -> list[int]:
    return [int(x) for x in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvp",
        description="Scene embeddings, grid prompts and target-affinity training.",
        epilog="exit codes: 0 success, 1 runtime error, 2 usage error; CVP_LOG=error|info|debug sets verbosity",
    )
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("gen-scene", help="write a synthetic scene (or a training suite) to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--objects", type=int, default=8)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--categories", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--suite", type=int, default=0, metavar="N",
                   help="write a retrieval suite of N training scenes instead of one scene")
    p.add_argument("--heldout", type=int, default=20, help="held-out scenes in a suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("backproject", help="dump the aggregated point-feature cloud as tensors")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_backproject)

    p = sub.add_parser("embed-objects", help="per-object pooled embeddings as JSON")
    p.add_argument("--scene", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_embed_objects)

    p = sub.add_parser("build-grid", help="serialize the allocentric grid prompt")
    p.add_argument("--scene", required=True)
    p.add_argument("--rows", type=int, default=grid.DEFAULT_SIZE)
    p.add_argument("--cols", type=int, default=grid.DEFAULT_SIZE)
    p.add_argument("--bounds", help="x0,x1,y0,y1 in meters (default: fit to object centers)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_build_grid)

    p = sub.add_parser("build-targets", help="positive object sets for a samples file")
    p.add_argument("--samples", required=True)
    p.add_argument("--scene-root", required=True)
    p.add_argument("--variant", choices=relevance.VARIANTS, default="gt_boxes")
    p.add_argument("--out")
    p.set_defaults(func=cmd_build_targets)

    p = sub.add_parser("train-affinity", help="train the affinity head on a data directory")
    p.add_argument("--data", required=True, help="directory with scenes/ and samples.jsonl")
    p.add_argument("--samples", default="samples.jsonl")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--tau", type=float, default=affinity.DEFAULT_TEMPERATURE)
    p.add_argument("--loss", choices=("infonce", "mse"), default="infonce")
    p.add_argument("--variant", choices=relevance.VARIANTS, default="gt_boxes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output head directory")
    p.set_defaults(func=cmd_train_affinity)

    p = sub.add_parser("retrieve", help="rank scene objects against a text query")
    p.add_argument("--scene", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--csv", help="also write rank,object_id,category,similarity rows here")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("ablate-grid", help="prompts and token counts for several grid sizes")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", type=_sizes, default=list(grid.ABLATION_SIZES))
    p.add_argument("--bounds")
    p.set_defaults(func=cmd_ablate_grid)

    p = sub.add_parser("selfcheck", help="run the built-in invariant checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("CVP_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def run(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    rec = RunRecorder(args.command, config)
    try:
        return args.func(args, rec)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cvp: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure maps to exit code 1
        log.debug("command failed", exc_info=True)
        print(f"cvp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
