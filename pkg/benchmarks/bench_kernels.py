"""Numba kernels vs their numpy twins, per kernel and end to end.

    python benchmarks/bench_kernels.py [--repeat 200] [--skip-e2e]

The end-to-end part runs one training job in two subprocesses, with
METAST_NO_NUMBA unset and set, and checks the final F1 matches.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from metast import _kernels as K

E2E = """
import json, time
from metast.cli import ExperimentSpec, run_one
from metast.selftrain import TrainConfig
from metast import _kernels
exp = ExperimentSpec(data="synth:small", train=TrainConfig(pseudo_noise=0.3, outer_rounds=1, reinit_student=False))
run_one(exp, 0)                      # warm-up (jit compile / cache load)
t = time.perf_counter(); rec = run_one(exp, 1); dt = time.perf_counter() - t
print(json.dumps({"backend": _kernels.BACKEND, "seconds": dt, "f1": rec.final_f1}))
"""


def inputs(n=400, vocab=200, d=32, hidden=64, n_tags=5, window=1, seed=0):
    rng = np.random.default_rng(seed)
    width = 2 * window + 1
    ctx = rng.integers(-1, vocab, size=(n, width))
    E = rng.normal(size=(vocab, d))
    X = K.gather_windows_np(E, ctx)
    W1 = rng.normal(size=(width * d, hidden))
    h = np.tanh(X @ W1)
    d2 = rng.normal(size=(n, n_tags))
    da = rng.normal(size=(n, hidden))
    G = (rng.normal(size=E.shape), rng.normal(size=W1.shape), rng.normal(size=hidden),
         rng.normal(size=(hidden, n_tags)), rng.normal(size=n_tags))
    return dict(E=E, ctx=ctx, X=X, W1=W1, h=h, d2=d2, da=da, G=G, vocab=vocab)


def bench(fn, repeat):
    fn()                                 # compile
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_table(repeat):
    a = inputs()
    cases = {
        "gather_windows": (lambda: K.gather_windows_np(a["E"], a["ctx"]),
                           lambda: K.gather_windows_nb(a["E"], a["ctx"])),
        "scatter_windows": (lambda: K.scatter_windows_np(a["X"], a["ctx"], a["vocab"]),
                            lambda: K.scatter_windows_nb(a["X"], a["ctx"], a["vocab"])),
        "meta_dots": (lambda: K.meta_dots_np(a["h"], a["d2"], a["X"], a["da"], a["W1"], a["ctx"], *a["G"]),
                      lambda: K.meta_dots_nb(a["h"], a["d2"], a["X"], a["da"], a["W1"], a["ctx"], *a["G"])),
    }
    print(f"{'kernel':<16} {'numpy us':>10} {'numba us':>10} {'speedup':>8} {'max diff':>10}")
    for name, (f_np, f_nb) in cases.items():
        t_np, t_nb = bench(f_np, repeat), bench(f_nb, repeat)
        diff = float(np.abs(f_np() - f_nb()).max())
        print(f"{name:<16} {t_np * 1e6:10.1f} {t_nb * 1e6:10.1f} {t_np / t_nb:8.2f} {diff:10.2e}")


def e2e():
    out = {}
    for flag in ("0", "1"):
        env = {**os.environ, "METAST_NO_NUMBA": flag}
        res = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        r = json.loads(res.stdout.strip().splitlines()[-1])
        out[r["backend"]] = r
        print(f"end-to-end {r['backend']:<6} {r['seconds']:.2f}s  final f1 {r['f1']:.4f}")
    if len(out) == 2:
        same = abs(out["numba"]["f1"] - out["numpy"]["f1"]) < 1e-9
        print(f"speedup {out['numpy']['seconds'] / out['numba']['seconds']:.2f}x, f1 match: {same}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    kernel_table(args.repeat)
    if not args.skip_e2e:
        e2e()
