"""Drive every CLI command once in a scratch directory and check reruns."""

import json
import shutil
from pathlib import Path

from ltfuse.cli import main

SMALL_CONFIG = {
    "data": {"k": 10, "n_max": 60, "n_min": 4, "reserve": 20, "dim": 6},
    "grid": {"filters": [1, 2], "degree": [3], "lr": [1e-3], "beta": [0.0]},
    "epochs": 10,
    "patience": 5,
    "seed": 2,
}


def ok(argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"{argv} exited {code}"


def run_every_command(root):
    """Returns {command: manifest path}."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "cfg.json").write_text(json.dumps(SMALL_CONFIG))
    ok(["gen-data", "--k", 10, "--n-max", 60, "--n-min", 4, "--reserve", 20, "--dim", 6, "--seed", 3,
        "--out", root / "split.json"])
    ok(["simulate", "--split", root / "split.json", "--profile", "visual", "--parts", "validation,test",
        "--bias-out", root / "bias.csv", "--out", root / "vis.csv"])
    ok(["train", "--config", root / "cfg.json", "--out-dir", root / "train", "--save-predictions"])
    ok(["gridsearch", "--config", root / "cfg.json", "--out-dir", root / "grid"])
    t = root / "train"
    ok(["eval", "--mode", "dragon", "--checkpoint", t / "checkpoint.json", "--preds-v", t / "test_v.csv",
        "--preds-s", t / "test_s.csv", "--counts", t / "counts.csv", "--out", root / "eval"])
    return {
        "gen-data": root / "split.run.json",
        "simulate": root / "vis.run.json",
        "train": t / "run_manifest.json",
        "gridsearch": root / "grid" / "run_manifest.json",
        "eval": root / "eval" / "run_manifest.json",
    }


def artifacts_of(manifest):
    doc = json.loads(Path(manifest).read_text())
    return {k: Path(v) if Path(v).is_absolute() else Path(doc["cwd"]) / v for k, v in doc["artifacts"].items()}


def rerun_in_place_identical(manifest):
    """Snapshot artifacts, rerun, compare bytes. Returns the differing names."""
    arts = artifacts_of(manifest)
    before = {k: p.read_bytes() for k, p in arts.items()}
    code = main(["rerun", str(manifest)])
    assert code == 0
    return sorted(k for k, p in arts.items() if p.read_bytes() != before[k])


def rerun_redirected_identical(command, manifest, new_out):
    """Rerun into ``new_out`` and compare each artifact with its original by name."""
    old = artifacts_of(manifest)
    code = main(["rerun", str(manifest), "--out", str(new_out)])
    assert code == 0
    new_out = Path(new_out)
    if command in ("gen-data", "simulate"):
        new_manifest = new_out.with_name(new_out.stem + ".run.json")
    else:
        new_manifest = new_out / "run_manifest.json"
    new = artifacts_of(new_manifest)
    diff = []
    for k, p in old.items():
        a, b = p.read_bytes(), new[k].read_bytes()
        if command == "gen-data" and k == "split":
            # the split names its own feature file
            a = a.replace(old["features"].name.encode(), b"@")
            b = b.replace(new["features"].name.encode(), b"@")
        if a != b:
            diff.append(k)
    return sorted(diff)


def clean(root):
    shutil.rmtree(root, ignore_errors=True)
