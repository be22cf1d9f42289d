#!/usr/bin/env python3
"""Benchmark the hot kernels: numba backend vs the pure-numpy fallback,
and the bit-packed binary convolution vs the float convolution.

Writes a JSON report next to this script by default. The binary/float
throughput ratio is recorded here, not asserted in CI.

Usage:
  python3 benchmarks/bench_kernels.py [--repeats 5] [--out results.json]
"""

import argparse
import json
import time

import numpy as np

from qcnn import kernels_numba, kernels_numpy
from qcnn import binary

SHAPES = {
    # (N, C, H, W), (F, C, kH, kW), stride, padding
    "lenet_conv1": ((128, 1, 28, 28), (6, 1, 5, 5), 1, 0),
    "lenet_conv2": ((128, 6, 12, 12), (16, 6, 5, 5), 1, 0),
    "resnet_stage1": ((128, 16, 32, 32), (16, 16, 3, 3), 1, 1),
}


def _time(fn, repeats):
    fn()  # warmup (and numba compilation)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def conv_macs(xshape, wshape, stride, padding):
    n, c, h, w = xshape
    f, _, kh, kw = wshape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    return n * f * oh * ow * c * kh * kw


def bench_backends(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for name, (xs, ws, stride, padding) in SHAPES.items():
        x = rng.normal(size=xs).astype(np.float32)
        w = rng.normal(size=ws).astype(np.float32)
        if padding:
            xp = np.zeros((xs[0], xs[1], xs[2] + 2 * padding, xs[3] + 2 * padding),
                          dtype=np.float32)
            xp[:, :, padding:padding + xs[2], padding:padding + xs[3]] = x
        else:
            xp = x
        macs = conv_macs(xs, ws, stride, padding)
        entry = {"shape": name, "macs": macs}
        for mod in (kernels_numba, kernels_numpy):
            fwd = _time(lambda: mod.conv2d_forward(xp, w, stride), repeats)
            dy = mod.conv2d_forward(xp, w, stride)
            bwd_in = _time(
                lambda: mod.conv2d_backward_input(dy, w, stride, xp.shape[2], xp.shape[3]),
                repeats)
            bwd_w = _time(
                lambda: mod.conv2d_backward_weight(dy, xp, ws[2], ws[3], stride), repeats)
            entry[mod.NAME] = {
                "forward_s": fwd,
                "backward_input_s": bwd_in,
                "backward_weight_s": bwd_w,
                "forward_gmacs_per_s": macs / fwd / 1e9,
            }
        rows.append(entry)
        print(f"{name:14s}  numba fwd {entry['numba']['forward_gmacs_per_s']:6.2f} "
              f"GMAC/s   numpy fwd {entry['numpy']['forward_gmacs_per_s']:6.2f} GMAC/s")
    return rows


def bench_binary_vs_float(repeats):
    """Same-shape throughput of the packed XNOR path vs the float conv."""
    rng = np.random.default_rng(1)
    rows = []
    for name, (xs, ws, stride, padding) in SHAPES.items():
        x = np.where(rng.random(xs) < 0.5, -1.0, 1.0).astype(np.float32)
        w = np.where(rng.random(ws) < 0.5, -1.0, 1.0).astype(np.float32)
        alpha = np.ones(ws[0], dtype=np.float32)
        layer = binary.BinaryConv(binary.pack_rows(w.reshape(ws[0], -1)), alpha, None,
                                  ws[1], ws[2], ws[3], stride, padding)
        if padding:
            xp = np.zeros((xs[0], xs[1], xs[2] + 2 * padding, xs[3] + 2 * padding),
                          dtype=np.float32)
            xp[:, :, padding:padding + xs[2], padding:padding + xs[3]] = x
        else:
            xp = x
        macs = conv_macs(xs, ws, stride, padding)

        def float_conv():
            from qcnn.backend import kernels

            return kernels.conv2d_forward(xp, w, stride)

        def packed_conv():
            patches = binary.pack_patches(x, ws[2], ws[3], stride, padding)
            return binary.binary_conv2d(patches, layer)

        t_float = _time(float_conv, repeats)
        t_packed = _time(packed_conv, repeats)
        # correctness cross-check while we are here
        assert np.array_equal(float_conv(), packed_conv())
        ratio = t_float / t_packed
        rows.append({
            "shape": name, "macs": macs,
            "float_s": t_float, "packed_s": t_packed,
            "float_gmacs_per_s": macs / t_float / 1e9,
            "packed_gmacs_per_s": macs / t_packed / 1e9,
            "packed_speedup": ratio,
        })
        print(f"{name:14s}  float {macs / t_float / 1e9:6.2f} GMAC/s   "
              f"packed {macs / t_packed / 1e9:6.2f} GMAC/s   speedup {ratio:5.2f}x")
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)

    print("== conv kernels: numba vs numpy ==")
    backends = bench_backends(args.repeats)
    print("== binary (xnor-popcount) vs float convolution ==")
    packed = bench_binary_vs_float(args.repeats)

    if args.out:
        with open(args.out, "w") as f:
            json.dump({"backends": backends, "binary_vs_float": packed}, f, indent=2)
        print(f"written {args.out}")


if __name__ == "__main__":
    main()
