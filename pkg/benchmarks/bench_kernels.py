"""Time the hot kernels with numba enabled and with the pure-numpy fallback.

The backend is fixed at import time by FSPNET_NUMBA, so each backend runs in
its own interpreter. Usage::

    python benchmarks/bench_kernels.py [--n 200000] [--repeat 5]
"""
import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, timeit
import numpy as np
from fspnet import _accel
from fspnet.baseline import PgStatInputs, pgstat
from fspnet.flow.spline import knots_from_raw, spline_batch
from fspnet.autodiff import tensor as T

n, repeat = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)
K = 8
xk, yk, d = (a.values for a in knots_from_raw(
    T.DiffArray(rng.normal(size=(n, K))), T.DiffArray(rng.normal(size=(n, K))),
    T.DiffArray(rng.normal(size=(n, K - 1))), 4.0))
x = rng.uniform(-5, 5, n)
S = rng.poisson(50.0, n).astype(float)
m = rng.uniform(10, 90, n)
inp = PgStatInputs(S, m, rng.uniform(0, 5, n), rng.uniform(0.5, 2, n))

cases = {
    "spline_forward": lambda: spline_batch(x, xk, yk, d),
    "spline_inverse": lambda: spline_batch(x, xk, yk, d, inverse=True),
    "pgstat": lambda: pgstat(inp),
}
out = {"backend": _accel.backend()}
for name, fn in cases.items():
    fn()  # compile / warm caches
    out[name] = min(timeit.repeat(fn, number=1, repeat=repeat))
print(json.dumps(out))
"""


def run(flag, n, repeat):
    env = dict(os.environ, FSPNET_NUMBA=flag)
    proc = subprocess.run([sys.executable, "-c", CHILD, str(n), str(repeat)], env=env,
                          capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=200_000)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    fast, slow = run("1", args.n, args.repeat), run("0", args.n, args.repeat)
    print(f"{'kernel':<16}{fast['backend']:>12}{slow['backend']:>12}{'ratio':>9}")
    for key in ("spline_forward", "spline_inverse", "pgstat"):
        print(f"{key:<16}{fast[key] * 1e3:>10.2f}ms{slow[key] * 1e3:>10.2f}ms"
              f"{slow[key] / fast[key]:>8.1f}x")


if __name__ == "__main__":
    main()
