import csv
import json

import pytest

from cvp.cli import COMMANDS, content_hash, count_tokens, run
from cvp.scene import load_scene

from conftest import DATA


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene") / "s"
    assert run(["gen-scene", "--out", str(out), "--objects", "6", "--noise", "0.1", "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def suite_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("suite")
    assert run(["gen-scene", "--out", str(out), "--suite", "4", "--heldout", "2"]) == 0
    return out


@pytest.fixture(scope="module")
def head_dir(suite_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("head") / "head.cvpt"
    assert run(["train-affinity", "--data", str(suite_dir), "--steps", "200", "--out", str(out)]) == 0
    return out


def test_gen_scene_writes_loadable_scene_and_manifest(scene_dir):
    bundle = load_scene(scene_dir)
    assert len(bundle.objects) == 6
    manifest = json.loads((scene_dir / "run_manifest.json").read_text())
    assert manifest["command"] == "gen-scene"
    assert manifest["config"]["seed"] == 3
    assert manifest["duration_s"] >= 0


def test_suite_layout(suite_dir):
    assert sorted(p.name for p in (suite_dir / "scenes").iterdir()) == [f"scene{i:04d}" for i in range(6)]
    lines = (suite_dir / "samples.jsonl").read_text().splitlines()
    assert lines and all(json.loads(l)["scene_id"] in {f"scene{i:04d}" for i in range(4)} for l in lines)


def test_backproject(scene_dir, tmp_path, capsys):
    out = tmp_path / "cloud"
    assert run(["backproject", "--scene", str(scene_dir), "--out", str(out)]) == 0
    assert {p.name for p in out.iterdir()} == {"positions.cvpt", "features.cvpt", "source_view.cvpt", "run_manifest.json"}
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["inputs"] == {str(scene_dir): content_hash(scene_dir)}
    assert "points, feature dim 16" in capsys.readouterr().out


def test_embed_objects_to_stdout(scene_dir, capsys):
    assert run(["embed-objects", "--scene", str(scene_dir)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert [e["object_id"] for e in doc["embeddings"]] == list(range(6))
    assert all(len(e["vector"]) == 16 for e in doc["embeddings"])


@pytest.mark.parametrize("name", ["empty", "single", "multi"])
def test_build_grid_stdout_matches_golden(name, capsysbinary):
    argv = ["build-grid", "--scene", str(DATA / "scenes" / f"golden_{name}"), "--rows", "6", "--cols", "6"]
    if name != "multi":
        argv += ["--bounds", "0,6,0,6"]
    assert run(argv) == 0
    assert capsysbinary.readouterr().out == (DATA / "golden" / f"{name}_6x6.txt").read_bytes()


def test_build_grid_file_output(tmp_path):
    out = tmp_path / "prompt.txt"
    assert run(["build-grid", "--scene", str(DATA / "scenes" / "golden_multi"), "--out", str(out)]) == 0
    assert out.read_bytes() == (DATA / "golden" / "multi_6x6.txt").read_bytes()
    assert json.loads((tmp_path / "prompt.txt.run.json").read_text())["outputs"] == [str(out)]


def test_ablate_grid_conserves_objects(tmp_path):
    scene = DATA / "scenes" / "golden_multi"
    assert run(["ablate-grid", "--scene", str(scene), "--out", str(tmp_path / "ab")]) == 0
    with open(tmp_path / "ab" / "token_counts.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["rows"]) for r in rows] == [6, 10, 16, 24]
    assert {int(r["object_mentions"]) for r in rows} == {len(load_scene(scene).objects)}
    for r in rows:
        text = (tmp_path / "ab" / r["prompt_file"]).read_text()
        assert int(r["token_count"]) == count_tokens(text)
        assert text.count("At (row=") == int(r["cell_lines"])


def test_build_targets_reproduces_fixture(tmp_path):
    base = DATA / "relevance"
    for variant in ("gt_boxes", "all_related_boxes"):
        out = tmp_path / f"{variant}.jsonl"
        argv = ["build-targets", "--samples", str(base / "samples.jsonl"), "--scene-root", str(base / "scenes"),
                "--variant", variant, "--out", str(out)]
        assert run(argv) == 0
        assert out.read_bytes() == (base / f"expected_{variant}.jsonl").read_bytes()


def test_train_affinity_writes_head(head_dir):
    assert (head_dir / "manifest.json").exists()
    assert (head_dir / "run_manifest.json").exists()


def test_retrieve_ranks_and_writes_csv(head_dir, suite_dir, tmp_path, capsys):
    scene = suite_dir / "scenes" / "scene0004"
    category = load_scene(scene).objects[0].category
    out = tmp_path / "ranks.csv"
    argv = ["retrieve", "--scene", str(scene), "--head", str(head_dir), "--query", f"where is the {category}",
            "--k", "3", "--csv", str(out)]
    assert run(argv) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 3
    rank, _, cat, sim = lines[0].split("\t")
    assert rank == "1" and cat == category
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["rank", "object_id", "category", "similarity"]
    sims = [float(r["similarity"]) for r in rows]
    assert sims == sorted(sims, reverse=True)
    assert (tmp_path / "ranks.csv.run.json").exists()


def test_selfcheck_passes(capsys):
    assert run(["selfcheck"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out and all(line.startswith("PASS") for line in out)


def test_inputs_are_not_mutated(scene_dir, tmp_path):
    before = content_hash(scene_dir)
    run(["backproject", "--scene", str(scene_dir), "--out", str(tmp_path / "c")])
    run(["embed-objects", "--scene", str(scene_dir), "--out", str(tmp_path / "e.json")])
    run(["ablate-grid", "--scene", str(scene_dir), "--out", str(tmp_path / "a")])
    assert content_hash(scene_dir) == before


# -- exit codes ----------------------------------------------------------------


def test_unknown_command_is_usage_error(capsys):
    assert run(["frobnicate"]) == 2
    err = capsys.readouterr().err
    assert all(c in err for c in COMMANDS)


@pytest.mark.parametrize("argv", [
    [],
    ["build-grid"],
    ["build-grid", "--scene", "x", "--rows", "six"],
    ["build-grid", "--scene", str(DATA / "scenes" / "golden_multi"), "--bounds", "1,2,3"],
    ["train-affinity", "--data", "x", "--out", "y", "--loss", "hinge"],
])
def test_usage_errors(argv):
    assert run(argv) == 2


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "ablate-grid" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["build-grid", "--scene", "/nonexistent/scene"],
    ["embed-objects", "--scene", "/nonexistent/scene"],
    ["build-grid", "--scene", str(DATA / "scenes" / "golden_empty")],
    ["retrieve", "--scene", str(DATA / "scenes" / "golden_multi"), "--head", "/nonexistent", "--query", "x"],
])
def test_runtime_errors(argv, capsys):
    assert run(argv) == 1
    assert capsys.readouterr().err.startswith("cvp ")
