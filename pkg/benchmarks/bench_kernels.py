"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--end-to-end]

Kernel timings use shapes from the desk-scale model (32x32 input, stem
stride 2, 64 expected batch). ``--end-to-end`` additionally times one private
training step per backend in a fresh interpreter, since the backend is fixed
at import.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from privcxr import kernels

STEP_SNIPPET = """
import time, numpy as np
from privcxr import kernels
from privcxr.accountant import DpSgdConfig, RdpAccountant
from privcxr.dp_engine import private_training_step
from privcxr.nn.model import ModelConfig, build_model
from privcxr.nn.optim import NAdamState
m = build_model(ModelConfig(image_size=32), 0)
rng = np.random.default_rng(0)
x, y = rng.normal(size=(64, 1, 32, 32)), (rng.random((64, 8)) < 0.3).astype(float)
st = NAdamState.fresh(m.num_parameters, 5e-4)
cfg = DpSgdConfig(0.03, 1.0, 1.5, 10, 1e-5)
best = 1e9
for i in range({repeat}):
    t = time.perf_counter()
    private_training_step(m, x, y, np.ones(8), cfg, st, RdpAccountant(), rng, 64.0)
    best = min(best, time.perf_counter() - t)
print(kernels.BACKEND, best)
"""


def cases(rng: np.random.Generator) -> dict:
    x = np.ascontiguousarray(rng.normal(size=(64, 16, 16, 16)))
    cols_shape = (64, 16 * 9, 16 * 16)
    cols = np.ascontiguousarray(rng.normal(size=cols_shape))
    flat = np.ascontiguousarray(rng.normal(size=64 * 16 * 16 * 16))
    g = np.ascontiguousarray(rng.normal(size=(64, 60_000)))
    return {
        "im2col": (lambda k: k.im2col(x, 3, 3, 1, 1)),
        "col2im": (lambda k: k.col2im(cols, x.shape, 3, 3, 1, 1)),
        "mish_forward": (lambda k: k.mish_forward(flat)),
        "row_norms": (lambda k: k.row_norms(g)),
        "clip_sum": (lambda k: k.clip_sum(g, 1.5)),
    }


def bench(repeat: int) -> list[tuple[str, dict[str, float]]]:
    backends = kernels.available_backends()
    fns = cases(np.random.default_rng(0))
    rows = []
    for name, fn in fns.items():
        times = {}
        for bname, mod in backends.items():
            t = timeit.Timer(lambda: fn(mod))
            number = max(1, int(0.2 / max(t.timeit(1), 1e-6)))
            times[bname] = min(t.repeat(repeat, number)) / number
        rows.append((name, times))
    return rows


def end_to_end(repeat: int) -> dict[str, float]:
    out = {}
    for flag in ("", "1"):
        env = {**os.environ, "PRIVCXR_PURE_PYTHON": flag}
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)], env=env,
                             capture_output=True, text=True, check=True)
        name, secs = res.stdout.split()
        out[name] = float(secs)
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()

    rows = bench(args.repeat)
    names = sorted({b for _, t in rows for b in t})
    print(f"{'kernel':<14}" + "".join(f"{n + ' ms':>14}" for n in names) + f"{'speedup':>10}")
    for name, t in rows:
        sp = t["numpy"] / t["cython"] if "cython" in t else float("nan")
        print(f"{name:<14}" + "".join(f"{1e3 * t[n]:>14.3f}" for n in names) + f"{sp:>10.2f}")
    if args.end_to_end:
        e2e = end_to_end(args.repeat)
        print("private step, batch 64:", ", ".join(f"{k} {v * 1e3:.0f} ms" for k, v in sorted(e2e.items())))


if __name__ == "__main__":
    main()
