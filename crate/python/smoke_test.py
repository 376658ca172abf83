"""Smoke test for the chronocam_py extension.

Builds the extension with cargo, loads it from the build directory and
exercises each exported function once.
"""

import importlib.util
import json
import math
import pathlib
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    subprocess.run(
        ["cargo", "build", "-p", "chronocam-py", "--release", "--offline"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "release" / "libchronocam_py.so"
    spec = importlib.util.spec_from_file_location("chronocam_py", lib)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    cc = load()
    print("chronocam_py", cc.__version__)

    tau = cc.generate_warp("slow_motion", 9, 2.0, 8.0, params={"factor": 0.5})
    assert tau[0] == 0.0 and all(b >= a for a, b in zip(tau, tau[1:]))
    assert abs(tau[-1] - 0.5) < 1e-12, tau
    latent = cc.pool_to_latent(tau[1:], 8.0, 2)
    assert 0 < len(latent) <= 4, latent

    traj = cc.sample_trajectory("orbit", 17, seed=3, centroid=[1.0, 0.0, 0.5])
    assert len(traj) == 17
    stats = traj.framing_stats([1.0, 0.0, 0.5])
    assert stats["max_orthonormality_error"] < 1e-9, stats
    back = cc.Trajectory.from_json(traj.to_json())
    assert cc.rot_err(traj, back) < 1e-9
    assert cc.trans_err(traj, back) < 1e-9
    c, s = math.cos(0.3), math.sin(0.3)
    moved = traj.transformed([[c, -s, 0], [s, c, 0], [0, 0, 1]], [2.0, -1.0, 0.5])
    assert cc.rot_err(traj, moved) < 1e-9

    h, w = 8, 8
    a = [0.5] * (h * w * 3)
    b = [0.0] * (h * w * 3)
    m = cc.image_metrics(a, b, (h, w, 3))
    assert abs(m["psnr"] - 6.0206) < 1e-3, m
    mask = [i % 2 == 0 for i in range(h * w)]
    assert abs(cc.image_metrics(a, b, (h, w, 3), mask=mask)["psnr"] - m["psnr"]) < 1e-12

    q = [[1.0, 0.0, 0.5, 0.2]] * 3
    qr, kr = cc.apply_time_rope(q, q, [0.0, 0.5, 1.25], time_scale=16.0)
    shifted, _ = cc.apply_time_rope(q, q, [3.0, 3.5, 4.25], time_scale=16.0)
    l0, l1 = cc.logits(qr, kr), cc.logits(shifted, shifted)
    assert all(abs(x - y) < 1e-9 for r0, r1 in zip(l0, l1) for x, y in zip(r0, r1))

    with tempfile.TemporaryDirectory() as out:
        n = cc.forge_dataset(1, out, frames=33)
        assert n == 9, n
        manifests = sorted(pathlib.Path(out).joinpath("manifests").rglob("*.json"))
        assert manifests
        ok, failed = cc.validate_manifest(str(manifests[0]))
        assert ok, failed
        json.loads(manifests[0].read_text())

    rows = cc.run_ablation(["trope+adaln"], [0], iterations=5)
    assert rows[0]["variant"] == "trope+adaln" and math.isfinite(rows[0]["held_out_loss"])

    try:
        cc.generate_warp("sideways", 9, 2.0, 8.0)
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("unknown kind accepted")

    print("smoke test ok")


if __name__ == "__main__":
    sys.exit(main())
