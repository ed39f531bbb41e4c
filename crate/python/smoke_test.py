"""Smoke test for the `rhi` Python extension.

Build first:  cargo build --release -p rhi-python
Then run:     python3 python/smoke_test.py [path/to/librhi.so]

Trains a tiny 16x16 decoder, checks predictions, adjoints and the causal
updates, runs one short trial and a one-trial-per-cell experiment.
"""

import importlib.machinery
import importlib.util
import math
import os
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_extension(path=None):
    candidates = [path] if path else [
        os.path.join(ROOT, "target", profile, name)
        for profile in ("release", "debug")
        for name in ("librhi.so", "librhi.dylib", "rhi.dll")
    ]
    for p in candidates:
        if p and os.path.exists(p):
            loader = importlib.machinery.ExtensionFileLoader("rhi", p)
            spec = importlib.util.spec_from_file_location("rhi", p, loader=loader)
            mod = importlib.util.module_from_spec(spec)
            loader.exec_module(mod)
            return mod
    sys.exit("extension not found; run `cargo build --release -p rhi-python` first")


def main():
    rhi = load_extension(sys.argv[1] if len(sys.argv) > 1 else None)
    small = {"resolution": 16}

    rest = rhi.rest_posture()
    x, y = rhi.forward_kinematics(*rest)
    assert abs(x + 0.30) < 1e-12 and abs(y - 0.50) < 1e-12, (x, y)
    jac = rhi.fk_jacobian(*rest)
    assert len(jac) == 2 and len(jac[0]) == 2

    pixels, side = rhi.render(*rest, offset_dx=-0.15, config=small)
    assert side == 16 and len(pixels) == 256 and max(pixels) > 0.5

    g = rhi.event_update(0.01, 2.0, 2.0)
    assert abs(g - 0.0510) < 1e-4, g
    assert rhi.decay_update(0.5, 0.0, 1.0, {"r_decay": 1}) == 0.5 * math.exp(-0.02)
    assert rhi.child_seed(1, "left", "sync", 0) == rhi.child_seed(1, "left", "sync", 0)
    assert rhi.child_seed(1, "left", "sync", 0) != rhi.child_seed(1, "left", "sync", 1)

    with tempfile.TemporaryDirectory() as tmp:
        ds = os.path.join(tmp, "arm.rhid")
        digest = rhi.generate_dataset(ds, grid=6, config=small)
        assert len(digest) == 64

        model_path = os.path.join(tmp, "dec.rhim")
        cfg = dict(small, train_epochs=20, train_batch=8, hidden_units=32, base_channels=16, train_lr=3e-3)
        model = rhi.train_model("decoder", ds, model_path, cfg)
        assert model.kind == "decoder" and model.resolution == 16
        assert math.isfinite(model.final_loss)
        again = rhi.VisualModel.load(model_path)
        assert again.weight_hash == model.weight_hash

        img, clamped = model.predict(*rest)
        assert len(img) == 256 and not clamped
        w = [(a - b) / 256 for a, b in zip(pixels, img)]
        adj = model.adjoint(*rest, w)
        cols = model.jacobian(*rest)
        dot = [sum(c * wi for c, wi in zip(col, w)) for col in cols]
        for a, b in zip(adj, dot):
            assert abs(a - b) <= 1e-9 * max(1.0, abs(a)), (adj, dot)

        trial_cfg = dict(small, duration_s=4, iterations=200)
        trace = rhi.run_trial(model, "left", "sync", 3, trial_cfg)
        assert trace["aborted"] is None
        assert len(trace["t_s"]) == 200 and trace["gamma"][0] == 0.01

        run_cfg = dict(trial_cfg, model_path=model_path, out_dir=tmp, run_id="smoke", trials_per_cell=1)
        run_dir, summary = rhi.run_experiment(run_cfg)
        assert os.path.exists(os.path.join(run_dir, "resolved-config.txt"))
        assert summary.splitlines()[0].startswith("condition,mode,trial,drift_cm")

    assert "sigma_p_inv" in rhi.default_config()
    print("python smoke test passed")


if __name__ == "__main__":
    main()
