"""Smoke test for the flowsep Python bindings.

Build and copy the module first:

    cargo build --release -p flowsep-py --features extension-module
    cp target/release/libflowsep_py.so python/flowsep_py.so
    python3 python/smoke_test.py
"""

import math
import os
import random
import shutil
import subprocess
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import flowsep_py as fs  # noqa: E402

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

TINY = """
[model]
n_blocks = 1
embed_dim = 8
n_heads = 2
n_bands = 4
time_embed_dim = 8
time_hidden = 8

[train]
steps = 2
batch_size = 1

[data]
n_eval = 1
"""


def check_basics():
    times = fs.schedule_times("custom5")
    assert len(times) == 6 and times[0] == 0.0 and times[-1] == 1.0, times
    assert fs.schedule_times("linear:4") == [0.0, 0.25, 0.5, 0.75, 1.0]
    try:
        fs.schedule_times("cubic")
    except ValueError:
        pass
    else:
        raise AssertionError("bad schedule name accepted")

    rng = random.Random(0)
    rows = [[rng.uniform(-1, 1) for _ in range(50)] for _ in range(3)]
    centered = fs.project_perp(rows)
    for col in zip(*centered):
        assert abs(sum(col)) < 1e-12

    ref = [[math.sin(0.1 * n) for n in range(400)], [math.cos(0.37 * n) for n in range(400)]]
    mean, per_source, perm = fs.si_sdr([ref[1], ref[0]], ref)
    assert perm == [1, 0] and mean >= 99.0, (mean, perm)
    assert len(per_source) == 2

    results = fs.selftest(0)
    assert results and all(ok for _, ok, _ in results), results
    print(f"basics ok, selftest {len(results)} checks passed")


def find_cli():
    for profile in ("release", "debug"):
        path = os.path.join(ROOT, "target", profile, "flowsep")
        if os.path.exists(path):
            return path
    return shutil.which("flowsep")


def check_separate():
    cli = find_cli()
    if cli is None:
        print("flowsep binary not built; skipping separation")
        return
    with tempfile.TemporaryDirectory() as tmp:
        cfg = os.path.join(tmp, "tiny.toml")
        with open(cfg, "w") as f:
            f.write(TINY)
        run = os.path.join(tmp, "run")
        subprocess.run([cli, "train", "--config", cfg, "--out-dir", run, "--log-every", "0"], check=True,
                       stdout=subprocess.DEVNULL)
        model = os.path.join(run, "model.ckpt")
        rng = random.Random(1)
        mixture = [0.1 * rng.uniform(-1, 1) for _ in range(1600)]
        est = fs.separate(model, mixture, sources=2, schedule="linear:3", seed=4)
        assert len(est) == 2 and all(len(r) == len(mixture) for r in est)
        worst = max(abs(a + b - y) for a, b, y in zip(est[0], est[1], mixture))
        assert worst < 1e-9, worst
        assert est == fs.separate(model, mixture, sources=2, schedule="linear:3", seed=4)
        try:
            fs.separate(os.path.join(tmp, "missing.ckpt"), mixture)
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint accepted")
    print(f"separation ok, mixture error {worst:.1e}")


if __name__ == "__main__":
    check_basics()
    check_separate()
    print("smoke test passed")
