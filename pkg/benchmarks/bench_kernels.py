"""Timing comparison of the compiled and pure-NumPy update kernels.

Runs each backend in a subprocess (the backend is chosen at import time via
TCNMF_PURE_PYTHON) over a few representative problem sizes and prints the
per-iteration cost plus the speedup of the compiled extension.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import json
import os
import subprocess
import sys
from pathlib import Path

WORKER = r"""
import json
import sys
import time

import numpy as np

from tcnmf import kernels
from tcnmf.nmf import NmfConfig, factorize

sizes = json.loads(sys.argv[1])
repeats = int(sys.argv[2])
out = {"backend": kernels.BACKEND, "cases": []}
for rows, cols, q, density in sizes:
    rng = np.random.default_rng(7)
    d = rng.random((rows, cols)) * (rng.random((rows, cols)) < density)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        model = factorize(d, NmfConfig(q=q, seed=0, max_iters=30, tol=0.0))
        best = min(best, (time.perf_counter() - t0) / model.n_iters)
    out["cases"].append(
        {
            "rows": rows,
            "cols": cols,
            "q": q,
            "nnz": int(np.count_nonzero(d)),
            "per_iter_ms": best * 1e3,
        }
    )
print(json.dumps(out))
"""


def run_backend(pure: bool, sizes, repeats: int) -> dict:
    env = dict(os.environ)
    env.pop("TCNMF_PURE_PYTHON", None)
    if pure:
        env["TCNMF_PURE_PYTHON"] = "1"
    proc = subprocess.run(
        [sys.executable, "-c", WORKER, json.dumps(sizes), str(repeats)],
        capture_output=True,
        text=True,
        env=env,
        cwd=Path(__file__).resolve().parent.parent,
        check=True,
    )
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args(argv)

    sizes = [
        [2_000, 30, 5, 0.10],
        [30_000, 30, 5, 0.20],
        [30_000, 100, 10, 0.05],
        [120_000, 50, 8, 0.10],
    ]
    compiled = run_backend(pure=False, sizes=sizes, repeats=args.repeats)
    pure = run_backend(pure=True, sizes=sizes, repeats=args.repeats)
    if compiled["backend"] != "compiled":
        print("warning: compiled extension unavailable, comparing python to itself")

    header = f"{'rows':>8} {'cols':>5} {'q':>3} {'nnz':>9} " \
             f"{'compiled ms/iter':>17} {'python ms/iter':>15} {'speedup':>8}"
    print(f"backends: {compiled['backend']} vs {pure['backend']}")
    print(header)
    print("-" * len(header))
    for fast, slow in zip(compiled["cases"], pure["cases"]):
        speedup = slow["per_iter_ms"] / fast["per_iter_ms"]
        print(
            f"{fast['rows']:>8} {fast['cols']:>5} {fast['q']:>3} {fast['nnz']:>9} "
            f"{fast['per_iter_ms']:>17.3f} {slow['per_iter_ms']:>15.3f} {speedup:>7.2f}x"
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
