"""Compare the numba kernels against the pure-numpy fallback.

Each backend runs in its own interpreter, because the backend is fixed at
import time by ``INVLP_DISABLE_NUMBA``. The first solve in each process is
a warm-up (JIT compilation or cache load) and is timed separately.

Usage::

    python3 benchmarks/bench_kernels.py --sizes 4x8 10x80 20x60 --reps 30
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
import invlp
from invlp import ipm
from invlp.lp import random_feasible_lp

sizes, reps = json.loads(sys.argv[1]), int(sys.argv[2])
t0 = time.perf_counter()
ipm.solve(random_feasible_lp(np.random.default_rng(0), 3, 6, 1))
warmup = time.perf_counter() - t0
rows = []
for D, M1 in sizes:
    rng = np.random.default_rng([D, M1])
    lps = [random_feasible_lp(rng, D, M1, 1) for _ in range(reps)]
    t0 = time.perf_counter()
    iters = 0
    for lp in lps:
        iters += ipm.solve(lp).iterations
    dt = time.perf_counter() - t0
    rows.append({"D": D, "M1": M1, "ms_per_solve": 1e3 * dt / reps, "iters": iters / reps})
print(json.dumps({"numba": invlp.USE_NUMBA, "warmup_s": warmup, "rows": rows}))
"""


def run_backend(disable, sizes, reps):
    env = dict(os.environ)
    env["INVLP_DISABLE_NUMBA"] = "1" if disable else "0"
    env.setdefault("INVLP_THREADS", "1")
    proc = subprocess.run([sys.executable, "-c", WORKER, json.dumps(sizes), str(reps)],
                          env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout)


def parse_size(text):
    D, M1 = text.lower().split("x")
    return [int(D), int(M1)]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", nargs="+", type=parse_size, default=[[4, 8], [10, 80], [20, 60]],
                   help="DxM1 problem sizes")
    p.add_argument("--reps", type=int, default=30, help="LPs per size")
    p.add_argument("--out", default=None, help="write the raw timings as JSON")
    args = p.parse_args(argv)

    jit = run_backend(False, args.sizes, args.reps)
    plain = run_backend(True, args.sizes, args.reps)
    if not jit["numba"]:
        print("numba is not importable; both runs used the numpy path", file=sys.stderr)
    print(f"warm-up: numba {jit['warmup_s']:.2f} s, numpy {plain['warmup_s']:.2f} s")
    print(f"{'D':>4} {'M1':>5} {'iters':>6} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for a, b in zip(jit["rows"], plain["rows"]):
        print(f"{a['D']:>4} {a['M1']:>5} {a['iters']:>6.1f} {a['ms_per_solve']:>10.2f} "
              f"{b['ms_per_solve']:>10.2f} {b['ms_per_solve'] / a['ms_per_solve']:>8.2f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"numba": jit, "numpy": plain}, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
