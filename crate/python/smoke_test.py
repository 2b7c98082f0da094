"""Smoke test for the `defusion` extension module.

Build and import the module first, for example:

    cargo build -p defusion-py --features extension-module
    ln -sf ../target/debug/libdefusion.so python/defusion.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

import defusion


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    scene = defusion.synthetic_scene(32, 32, seed=3)
    check(scene.shape == (32, 32, 3), "synthetic scene shape")
    values = scene.to_values()
    check(all(0.0 <= v <= 1.0 for v in values), "values in [0, 1]")
    check(defusion.Image.from_values(32, 32, 3, values) == scene, "value round trip")

    parts = defusion.degrade(scene, patch=8, cover_frac=0.75, seed=1)
    check(set(parts) == {"x1", "x2", "common", "unique1", "unique2"}, "degradation outputs")

    check(defusion.ssim(scene, scene) == 1.0, "ssim identity")
    check(defusion.psnr(scene, scene) == 99.0, "psnr cap")
    check(abs(defusion.cc(scene, scene, scene) - 1.0) < 1e-12, "cc identity")
    check(abs(defusion.ncie(scene, scene, scene) - 1.0) < 1e-9, "ncie identity")
    check(defusion.nabf(scene, scene, scene) == 0.0, "nabf no artifacts")
    check(abs(defusion.mef_ssim(scene, [scene, scene]) - 1.0) < 1e-9, "mef_ssim degenerate stack")
    under, over = defusion.synthetic_exposure_pair(32, 32, seed=2)
    scores = defusion.evaluate("mef", under, under, over)
    check(set(scores) == {"ncie", "nabf", "ssim", "cc", "mef_ssim"}, "mef metric set")

    try:
        defusion.ssim(scene, defusion.synthetic_scene(16, 16))
        check(False, "dims mismatch raises")
    except ValueError:
        check(True, "dims mismatch raises")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "scene.png")
        scene.save(path)
        back = defusion.Image.load(path)
        diff = max(abs(a - b) for a, b in zip(back.to_values(), values))
        check(diff <= 0.5 / 255 + 1e-6, "png round trip within quantisation")

        corpus = [defusion.synthetic_scene(32, 32, seed=s) for s in range(3)]
        ckpt, digest, losses = defusion.train(
            corpus, tmp, epochs=1, steps_per_epoch=2, batch_size=2, crop=32, seed=5
        )
        check(len(losses) == 2 and all(math.isfinite(v) for v in losses), "training losses finite")
        model = defusion.Model.load(ckpt)
        check(model.checkpoint_hash == digest, "checkpoint hash")

        fused = model.fuse(under, over)
        check(fused.shape == under.shape, "fused shape")
        check(model.fuse(under, over) == fused, "fusion deterministic")
        visuals = model.decompose(under, over)
        check(len(visuals) == 6, "six decomposition visuals")
        n, d = model.export_features(under, over, os.path.join(tmp, "f.feat"))
        check((n, d) == (16, 64), "feature export dims")

    fresh = defusion.Model("micro", seed=0)
    vis, ir = defusion.synthetic_modal_pair(24, 40, seed=4)
    check(fresh.fuse(vis, ir, mode="multi").shape == (24, 40, 3), "multi-modal fusion on padded input")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
