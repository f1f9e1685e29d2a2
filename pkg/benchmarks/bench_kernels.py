"""Time the hot kernels under numba and under the pure-numpy fallback.

The backend is fixed at import time by CVATTN_DISABLE_NUMBA, so each backend
runs in its own interpreter.  Usage:

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel with the median time of both backends and their
ratio, then a training-step comparison (chanvese U-Net, batch 8, 64x64).
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _median_time(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def run_worker(repeat: int) -> dict:
    from cvattn import _kernels as k
    from cvattn.distance_transform import DtParams, dt_kernel

    r = np.random.default_rng(0)
    phi = r.normal(size=(16, 64, 64))
    g = r.normal(size=(16, 64, 64))
    x4 = r.normal(size=(8 * 16, 64, 64)).astype(np.float32)
    alpha = r.uniform(size=(16, 32, 32))
    ker = dt_kernel(DtParams(0.5))
    pts_a = r.integers(0, 64, size=(600, 2)).astype(np.float64)
    pts_b = r.integers(0, 64, size=(600, 2)).astype(np.float64)
    out, arg = k.maxpool2x2(x4)
    cols = r.normal(size=(16, 3, 3, 8, 64, 64)).astype(np.float32)
    _, nx, ny, mag = k.curvature_fields(phi, 1.0)

    cases = {
        "curvature_fields 16x64x64": lambda: k.curvature_fields(phi, 1.0),
        "curvature_backward 16x64x64": lambda: k.curvature_backward(g, nx, ny, mag),
        "correlate2d_same 16x32x32 r7": lambda: k.correlate2d_same(alpha, ker),
        "maxpool2x2 8x16x64x64": lambda: k.maxpool2x2(x4),
        "maxpool2x2_backward": lambda: k.maxpool2x2_backward(out, arg),
        "col2im 16ch 3x3 8x64x64": lambda: k.col2im(cols, 66, 66, 1),
        "min_sq_dist 600x600": lambda: k.min_sq_dist(pts_a, pts_b),
    }
    res = {name: _median_time(fn, repeat) for name, fn in cases.items()}

    from cvattn.attention import CvGateConfig
    from cvattn.losses import segmentation_loss
    from cvattn.tensor import GradientTape
    from cvattn.unet import UNetConfig, build

    model = build(UNetConfig(depth=3, base_channels=8, gate_mode="chanvese", gate=CvGateConfig()))
    xb = r.normal(size=(8, 1, 64, 64)).astype(np.float32)
    tb = (r.random((8, 1, 64, 64)) > 0.8).astype(np.float32)

    def step():
        with GradientTape() as tape:
            logits, _ = model(xb)
            loss = segmentation_loss(logits, tb)
        tape.backward(loss, model.params.tensors())
        model.params.zero_grad()

    res["train step chanvese b8 64x64"] = _median_time(step, max(3, repeat // 4))
    res["_backend"] = k.backend()
    return res


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.worker:
        print(json.dumps(run_worker(args.repeat)))
        return 0

    results = {}
    for flag in ("0", "1"):
        env = dict(os.environ, CVATTN_DISABLE_NUMBA=flag)
        out = subprocess.run(
            [sys.executable, __file__, "--worker", "--repeat", str(args.repeat)],
            env=env, check=True, capture_output=True, text=True,
        ).stdout
        res = json.loads(out.strip().splitlines()[-1])
        results[res.pop("_backend")] = res

    nb, npy = results["numba"], results["numpy"]
    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name in nb:
        print(f"{name:34s} {1e3 * nb[name]:10.3f} {1e3 * npy[name]:10.3f} {npy[name] / nb[name]:8.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
