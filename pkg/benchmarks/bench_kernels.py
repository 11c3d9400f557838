"""Benchmark the compiled convolution kernels against the numpy fallback.

Runs every encoder-layer shape used by the default model configuration plus
one full contrastive train step per backend, and prints a table.

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import importlib
import os
import time

import numpy as np

# both backends are imported directly; the env-var selection is bypassed here
from terralign.kernels import numpy_backend

try:
    from terralign.kernels import _conv as compiled
except ImportError:
    compiled = None

RNG = np.random.default_rng(0)

# (label, kind, x shape, w shape, stride) — the default encoder layers at batch 32
CASES = [
    ("loco conv1", "1d", (32, 27, 244), (32, 27, 5), 2),
    ("loco conv2", "1d", (32, 32, 124), (32, 32, 5), 2),
    ("loco conv3", "1d", (32, 32, 64), (64, 32, 5), 2),
    ("loco conv4", "1d", (32, 64, 34), (64, 64, 5), 2),
    ("act  conv1", "1d", (32, 2, 244), (16, 2, 5), 2),
    ("act  conv2", "1d", (32, 16, 124), (32, 16, 5), 2),
    ("obs  conv1", "2d", (32, 1, 34, 66), (16, 1, 3, 3), 2),
    ("obs  conv2", "2d", (32, 16, 18, 34), (32, 16, 3, 3), 2),
    ("obs  conv3", "2d", (32, 32, 10, 18), (64, 32, 3, 3), 2),
    ("obs  conv4", "2d", (32, 64, 6, 10), (64, 64, 3, 3), 2),
]


def time_call(fn, *args, repeats):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats * 1e3


def bench_kernels(repeats):
    print(f"{'layer':<12} {'dir':<4} {'numpy ms':>9} {'cython ms':>10} {'speedup':>8}")
    totals = {"numpy": 0.0, "cython": 0.0}
    for label, kind, xs, ws, stride in CASES:
        x = RNG.standard_normal(xs).astype(np.float32)
        w = RNG.standard_normal(ws).astype(np.float32)
        fwd_np = getattr(numpy_backend, f"conv{kind[0]}d_forward")
        bwd_np = getattr(numpy_backend, f"conv{kind[0]}d_backward")
        out = fwd_np(x, w, stride)
        g = np.ascontiguousarray(RNG.standard_normal(out.shape).astype(np.float32))
        rows = [("fwd", fwd_np, (x, w, stride)), ("bwd", bwd_np, (x, w, g, stride))]
        for direction, np_fn, np_args in rows:
            t_np = time_call(np_fn, *np_args, repeats=repeats)
            totals["numpy"] += t_np
            if compiled is not None:
                cy_fn = getattr(compiled, np_fn.__name__)
                t_cy = time_call(cy_fn, *np_args, repeats=repeats)
                totals["cython"] += t_cy
                print(f"{label:<12} {direction:<4} {t_np:9.3f} {t_cy:10.3f} {t_np / t_cy:7.2f}x")
            else:
                print(f"{label:<12} {direction:<4} {t_np:9.3f} {'n/a':>10} {'':>8}")
    if compiled is not None:
        print(
            f"{'total':<12} {'':<4} {totals['numpy']:9.3f} {totals['cython']:10.3f} "
            f"{totals['numpy'] / totals['cython']:7.2f}x"
        )


def bench_train_step(repeats):
    from terralign import contrastive, encoders

    results = {}
    backends = ["numpy"] + (["cython"] if compiled is not None else [])
    for backend in backends:
        os.environ["TERRALIGN_KERNELS"] = backend
        import terralign.kernels as pkg

        importlib.reload(pkg)
        importlib.reload(importlib.import_module("terralign.diffengine"))
        importlib.reload(importlib.import_module("terralign.encoders"))
        importlib.reload(importlib.import_module("terralign.contrastive"))
        from terralign import contrastive as ct, encoders as en

        ckpt = en.init_params(en.ModelConfig(), 0)
        opt = ct.Adam(ckpt.trainable())
        batch = {
            "obs": RNG.random((32, 32, 64), dtype=np.float32),
            "loco": RNG.standard_normal((32, 240, 27)).astype(np.float32),
            "act": RNG.random((32, 240, 2), dtype=np.float32),
        }
        for _ in range(2):
            ct.train_step(ckpt, batch, opt, 1e-4)
        t0 = time.perf_counter()
        for _ in range(repeats):
            ct.train_step(ckpt, batch, opt, 1e-4)
        results[backend] = (time.perf_counter() - t0) / repeats * 1e3
    os.environ.pop("TERRALIGN_KERNELS", None)
    print()
    for backend, ms in results.items():
        print(f"full train step (batch 32, {backend:>6}): {ms:8.1f} ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()
    if compiled is None:
        print("compiled extension not available; timing the numpy fallback only\n")
    bench_kernels(args.repeats)
    bench_train_step(max(args.repeats // 2, 5))


if __name__ == "__main__":
    main()
