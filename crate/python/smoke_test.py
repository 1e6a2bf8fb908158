"""Smoke test for the slgnet_py extension.

Builds the cdylib with cargo, exposes it under its import name in a temp
directory and exercises each binding once.

    python3 python/smoke_test.py
"""

import json
import os
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def build_extension(dest: pathlib.Path) -> None:
    subprocess.run(["cargo", "build", "--release", "-p", "slgnet-py"], cwd=ROOT, check=True)
    target = pathlib.Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target")) / "release"
    for name in ("libslgnet_py.so", "libslgnet_py.dylib"):
        lib = target / name
        if lib.exists():
            shutil.copy(lib, dest / "slgnet_py.so")
            return
    sys.exit(f"no built library found in {target}")


def main() -> None:
    tmp = pathlib.Path(tempfile.mkdtemp())
    build_extension(tmp)
    sys.path.insert(0, str(tmp))
    import slgnet_py as slg

    assert "+sa+lgm" in slg.TRAIN_MODES

    assert slg.average_precision([0.9, 0.1, 0.8], [1.0, 0.0, 1.0]) == 1.0
    try:
        slg.average_precision([0.1], [])
    except ValueError:
        pass
    else:
        raise AssertionError("length mismatch should raise")

    samples = slg.synthesize(4, seed=3, image_size=32, cell=8)
    assert len(samples) == 4
    s = samples[0]
    assert len(s["visible"]) == 3 * 32 * 32 and len(s["thermal"]) == 32 * 32
    assert len(s["heatmap"]) == 16 and len(s["caption"]) == 4
    again = slg.synthesize(4, seed=3, image_size=32, cell=8)
    assert again[0]["visible"] == s["visible"]

    maps = slg.structure_maps(s["visible"], s["thermal"], 32)
    names = {name for name, _, _, _ in maps}
    assert {"level1_grad_v", "level1_gate_t", "level3_grad_ref"} <= names
    for _, h, w, data in maps:
        assert len(data) == h * w

    grad = json.loads(slg.gradcheck("tensor_autodiff", 0))
    assert grad["passed"], grad

    config = json.dumps({"image_size": 32, "depth": 2, "width": 16, "heads": 2, "epochs": 1,
                         "train_samples": 16, "val_samples": 16, "base_lr": 0.01})
    ckpt = tmp / "run.slg"
    report = json.loads(slg.train("+sa+lgm", config, str(ckpt)))
    assert len(report["epochs"]) == 1
    metrics = json.loads(slg.evaluate(str(ckpt)))
    assert metrics == report["final"], (metrics, report["final"])

    try:
        slg.train("bogus")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown mode should raise")

    print("slgnet_py smoke test passed")


if __name__ == "__main__":
    main()
