"""Compare the numba and pure-numpy kernel tables, per kernel and end to end.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--seq-len T] [--json PATH]

The per-kernel section calls both tables directly in one process. The end-to-end
section times a toy-model training step in two subprocesses, one per value of
COTLORA_NUMBA, since the backend is fixed at import time.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from cotlora.nn import _kernels as K

_STEP = """
import time, numpy as np
from cotlora.nn import LoraConfig, ToyTransformer, ToyTransformerConfig, inject_adapters, _kernels
from cotlora.train import TokenizedRecord, sft_step
rng = np.random.default_rng(0)
cfg = ToyTransformerConfig(vocab_size=512, max_seq_len={T})
model = inject_adapters(ToyTransformer.init(cfg), config=LoraConfig())
model.train()
batch = [TokenizedRecord(rng.integers(0, 512, size={T}), np.ones({T}, dtype=bool)) for _ in range(8)]
sft_step(batch, model)
best = float("inf")
for _ in range({R}):
    model.zero_grad()
    t = time.perf_counter()
    sft_step(batch, model)
    best = min(best, time.perf_counter() - t)
print(_kernels.BACKEND, best)
"""


def kernel_inputs(name, rng, rows, width):
    x = rng.normal(size=(rows, width))
    if name == "causal_softmax":
        return (x, width)
    if name == "softmax_backward":
        p = K.np_causal_softmax(x, width)
        return (p, rng.normal(size=p.shape))
    if name == "rmsnorm_forward":
        return (x, rng.normal(size=width), 1e-6)
    if name == "rmsnorm_backward":
        w = rng.normal(size=width)
        _, inv = K.np_rmsnorm_forward(x, w, 1e-6)
        return (rng.normal(size=x.shape), x, w, inv)
    if name == "swiglu_forward":
        return (x, rng.normal(size=x.shape))
    if name == "swiglu_backward":
        return (rng.normal(size=x.shape), x, rng.normal(size=x.shape))
    if name == "cross_entropy":
        return (x, rng.integers(0, width, size=rows), rng.random(rows))
    raise KeyError(name)


def time_call(fn, args, repeats):
    fn(*args)  # warm-up, includes JIT compilation
    return min(timeit.repeat(lambda: fn(*args), number=10, repeat=repeats)) / 10


def bench_kernels(repeats, seq_len):
    rng = np.random.default_rng(0)
    rows = []
    for name in sorted(K.NUMPY_KERNELS):
        args = kernel_inputs(name, rng, 8 * 4 * seq_len, seq_len)
        row = {"kernel": name, "numpy_s": time_call(K.NUMPY_KERNELS[name], args, repeats)}
        if K.NUMBA_KERNELS is not None:
            row["numba_s"] = time_call(K.NUMBA_KERNELS[name], args, repeats)
            row["speedup"] = row["numpy_s"] / row["numba_s"]
        rows.append(row)
    return rows


def bench_step(flag, repeats, seq_len):
    env = {**os.environ, K.ENV_FLAG: flag}
    code = _STEP.format(T=seq_len, R=repeats)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    backend, seconds = out.stdout.split()
    return backend, float(seconds)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seq-len", type=int, default=128)
    parser.add_argument("--json", help="also write results to this file")
    args = parser.parse_args(argv)

    rows = bench_kernels(args.repeats, args.seq_len)
    print(f"{'kernel':<18}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>10}")
    for row in rows:
        nb = f"{row['numba_s'] * 1e3:12.3f}{row['speedup']:10.2f}" if "numba_s" in row else f"{'n/a':>12}{'':>10}"
        print(f"{row['kernel']:<18}{row['numpy_s'] * 1e3:12.3f}{nb}")

    steps = {}
    for flag in ("0", "1") if K.NUMBA_KERNELS is not None else ("0",):
        backend, seconds = bench_step(flag, args.repeats, args.seq_len)
        steps[backend] = seconds
        print(f"sft_step batch 8 x {args.seq_len} tokens [{backend}]: {seconds * 1e3:.1f} ms")
    if len(steps) == 2:
        print(f"end-to-end speedup: {steps['numpy'] / steps['numba']:.2f}x")

    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"seq_len": args.seq_len, "kernels": rows, "sft_step_s": steps}, fh, indent=2)


if __name__ == "__main__":
    main()
