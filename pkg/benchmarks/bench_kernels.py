"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Times conv forward/backward at the shapes the Small variant sees, the
first-order IIR over a DB2-sized recording, and one full training step.
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from hdcam import tensor as T
from hdcam.model import HdcamModel, named_variant
from hdcam.tensor import _fallback, backend


def conv_cases(rng):
    # (name, padded input [B, Lp, Cin], weight [K, Cin/g, Cout], stride, groups)
    return [
        ("stem 10x1/10", rng.standard_normal((32, 400, 12)), rng.standard_normal((10, 12, 24)), 10, 1),
        ("depthwise 3x1", rng.standard_normal((32, 42, 8)), rng.standard_normal((3, 1, 8)), 1, 8),
        ("downsample 2/2", rng.standard_normal((32, 40, 24)), rng.standard_normal((2, 24, 32)), 2, 1),
    ]


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(repeat: int) -> list[dict]:
    rows = []
    rng = np.random.default_rng(0)
    kernels = {"python": _fallback}
    if backend.compiled is not None:
        kernels["compiled"] = backend.compiled
    for name, xp, w, stride, groups in conv_cases(rng):
        xp, w = xp.astype(np.float32), w.astype(np.float32)
        b = np.zeros(w.shape[2], np.float32)
        gout = _fallback.conv1d_forward(xp, w, b, stride, groups)
        for kname, k in kernels.items():
            fwd = best_of(lambda: k.conv1d_forward(xp, w, b, stride, groups), repeat)
            bwd = best_of(lambda: k.conv1d_backward(xp, w, gout, stride, groups), repeat)
            rows.append({"case": f"conv {name}", "backend": kname, "forward_ms": 1e3 * fwd, "backward_ms": 1e3 * bwd})

    x = rng.standard_normal((200_000, 12)).astype(np.float32)
    for kname, k in kernels.items():
        t = best_of(lambda: k.iir1_filter(x, 0.0016, 0.0016, -0.9968), max(1, repeat // 3))
        rows.append({"case": "iir 200k x 12", "backend": kname, "forward_ms": 1e3 * t, "backward_ms": None})

    model = HdcamModel(named_variant("Small", window_ms=200), seed=0)
    xb = T.Tensor(rng.standard_normal((32, 400, 12)).astype(np.float32))
    yb = rng.integers(0, 17, 32)

    def step():
        T.backward(T.cross_entropy(model(xb), yb))
        model.zero_grad()

    before = backend.name()
    for kname in kernels:
        backend.use(kname)
        step()
        t = best_of(step, repeat)
        rows.append({"case": "Small train step B=32 W=200", "backend": kname, "forward_ms": 1e3 * t,
                     "backward_ms": None})
    backend.use(before)
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if backend.compiled is None:
        print("compiled extension not built; timing the fallback only", file=sys.stderr)
    rows = run(args.repeat)
    print(f"{'case':<30}{'backend':<10}{'fwd/total ms':>14}{'bwd ms':>10}")
    for r in rows:
        bwd = f"{r['backward_ms']:.2f}" if r["backward_ms"] is not None else "-"
        print(f"{r['case']:<30}{r['backend']:<10}{r['forward_ms']:>14.2f}{bwd:>10}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
