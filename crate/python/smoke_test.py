#!/usr/bin/env python3
"""Builds the motion_manifold_py extension module and exercises the bound
API end to end: synthetic data, training, the latent-space operations, and
the evaluation report."""

import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def build_module(dest_dir: Path) -> None:
    subprocess.run(
        ["cargo", "build", "-p", "motion-manifold-py"], cwd=ROOT, check=True
    )
    lib = ROOT / "target" / "debug" / "libmotion_manifold_py.so"
    shutil.copy2(lib, dest_dir / "motion_manifold_py.so")


def main() -> None:
    tmp = Path(tempfile.mkdtemp(prefix="motion-manifold-"))
    build_module(tmp)
    sys.path.insert(0, str(tmp))
    import motion_manifold_py as mm

    skeleton = mm.Skeleton.chain(4, 0.5)
    assert skeleton.n_joints == 4
    assert len(mm.Skeleton.human17().joint_names) == 17

    clips = mm.generate_clips(skeleton, n_clips=4, n_frames=24, fps=25.0, seed=3)
    assert len(clips) == 4
    assert clips[0].n_frames == 24 and clips[0].dim == 12
    assert len(clips[0]) == 24
    assert clips[0].reversed().frame(0) == clips[0].frame(23)

    out_dir = tmp / "run"
    model = mm.train(
        clips,
        skeleton,
        out_dir,
        seq_len=12,
        epochs=10,
        batch_size=4,
        hidden_dim=16,
        latent_dim=4,
        seed=0,
    )
    assert (out_dir / "loss.csv").exists()
    assert (out_dir / "checkpoint.json").exists()
    assert model.variant == "DKGM"
    assert (model.n_joints, model.latent_dim, model.seq_len) == (4, 4, 12)

    window = clips[0].window(0, 12)
    z = model.encode(window)
    assert len(z) == model.latent_dim
    rec = model.decode(z)
    assert rec.n_frames == 12 and rec.dim == 12
    assert model.decode(z, decoder="velocity").n_frames == 12
    raw = model.decode(z, emitted=True)
    assert raw.frames() == rec.reversed().frames()

    loaded = mm.Model.load(out_dir / "checkpoint.json")
    assert loaded.encode(window) == z

    other = clips[1].window(3, 12)
    path = model.interpolate(window, other, steps=4)
    assert len(path) == 5
    assert path[0].frames() == model.reconstruct(window).frames()
    assert path[4].frames() == model.reconstruct(other).frames()

    assert model.denoise(other).n_frames == 12
    transferred = model.analogy(window, window, other)
    assert transferred.frames() == model.reconstruct(other).frames()
    assert len(model.sample(3, seed=9)) == 3

    report = model.evaluate(clips, skeleton, fps=25.0, windows=4, seed=1)
    assert set(report["decoders"]) == {"rotation", "velocity"}
    assert len(report["decoders"]["rotation"]["angle"]) == 5
    assert len(report["interval_seconds"]) == 5
    assert report["latent_error"] >= 0.0

    try:
        model.decode([0.0])
    except ValueError:
        pass
    else:
        raise AssertionError("a wrong-sized code must raise ValueError")

    try:
        mm.Motion([[1.0, 2.0], [3.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("ragged frames must raise ValueError")

    print("smoke test passed")


if __name__ == "__main__":
    main()
