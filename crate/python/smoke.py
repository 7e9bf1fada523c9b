"""Smoke test for the Python bindings.

Builds the extension with cargo, copies it next to a temporary import path
as promptseg.so, then exercises every exported entry point on a tiny task.

    python3 python/smoke.py [--release]
"""

import argparse
import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent

TINY_BACKBONE = {"image_size": 16}
TINY_TASK = {"image_size": 16, "source_size": 20, "train": 4, "val": 2, "test": 2, "seed": 5}
TINY_TRAIN = {"steps": 3, "batch_size": 2, "micro_batch": 2, "eval_every": 2, "eval_samples": 2}


def build(release):
    cmd = ["cargo", "build", "-p", "promptseg-python"] + (["--release"] if release else [])
    subprocess.run(cmd, cwd=ROOT, check=True)
    return ROOT / "target" / ("release" if release else "debug") / "libpromptseg.so"


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--release", action="store_true")
    args = parser.parse_args()

    lib = build(args.release)
    work = Path(tempfile.mkdtemp())
    shutil.copy(lib, work / "promptseg.so")
    sys.path.insert(0, str(work))
    import promptseg as ps

    assert ps.strategies() == [
        "deep-textual", "coop", "cocoop", "vpt", "maple", "shared-attention", "shared-separate",
    ], ps.strategies()

    bb = ps.Backbone(TINY_BACKBONE, seed=3)
    bb.save(str(work / "bb.ckpt"))
    assert ps.Backbone.load(str(work / "bb.ckpt")).checksum() == bb.checksum()
    assert bb.max_depth("coop") == bb.config()["text_layers"]

    data = ps.Dataset.generate(TINY_TASK)
    assert data.sizes() == (4, 2, 2)
    manifest = data.write(str(work / "data"))
    assert ps.Dataset.load(manifest).sizes() == (4, 2, 2)

    for kind in ps.strategies():
        cfg = dict(TINY_TRAIN, prompt={"kind": kind, "length": 2, "depth": 1})
        run = ps.train(bb, data, cfg)
        assert run.metrics[-1]["step"] == 3
        assert len(run.step_losses) == 3 and all(math.isfinite(x) for x in run.step_losses)
        assert run.backbone_checksum == bb.checksum()
        assert run.trainable_parameter_count() > 0
        assert 0.0 <= run.score(bb, data, "test") <= 1.0
        run.save(str(work / f"{kind}.ckpt"))
        print(f"{kind}: {run.trainable_parameter_count()} trainable, train dice {run.final_dice:.3f}")

    try:
        ps.train(bb, data, dict(TINY_TRAIN, inject_backbone_mutation_at=1))
    except ps.FreezeViolation as e:
        print("mutation rejected:", e)
    else:
        raise AssertionError("mutation was not detected")

    try:
        ps.train(bb, data, {"stepz": 1})
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    study = work / "study.jsonl"
    base = dict(TINY_TRAIN, steps=1)
    assert len(ps.sweep(bb, data, "maple", 2, base, path=str(study))) == 2
    trials = ps.sweep(bb, data, "maple", 3, base, path=str(study))
    assert [t["trial_id"] for t in trials] == [0, 1, 2]

    assert ps.dice_score([[1, 1], [0, 0]], [[1, 0], [0, 0]]) == 2 / 3
    slope, intercept, r2 = ps.fit_line([(1, 1), (2, 3), (3, 5)])
    assert abs(slope - 2) < 1e-12 and abs(intercept + 1) < 1e-12 and abs(r2 - 1) < 1e-12

    shutil.rmtree(work)
    print("python smoke test passed")


if __name__ == "__main__":
    main()
