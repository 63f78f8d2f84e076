"""Compare the compiled and pure-Python kernels.

Run with ``python benchmarks/bench_kernels.py [--repeat 5]``. Prints one
JSON line per (kernel, task shape) with median wall-clock times and the
speedup of the compiled backend.
"""
import argparse
import json
import statistics
import time

import numpy as np

from afin.kernels import _pykernels, pack_task
from afin.simulator import SimulatorConfig, rng_stream, simulate_task

try:
    from afin.kernels import _ckernels
except ImportError:
    _ckernels = None

SHAPES = [(2, 8), (8, 64), (16, 256)]


def median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def bench_shape(d, n, repeat, batch, chain):
    task = simulate_task(SimulatorConfig(d_max=16, N_max=256), rng_stream(0, d, n), d=d, n=n)
    packed = pack_task(task)
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(batch, d))
    normals = rng.normal(size=(chain, d))
    log_u = np.log(rng.uniform(size=chain))
    chol = 0.1 * np.eye(d)
    z0 = np.zeros(d)
    results = []
    for kernel in ("log_posterior_batch", "rwm_run"):
        row = {"kernel": kernel, "d": d, "N": n}
        for name, mod in (("python", _pykernels), ("compiled", _ckernels)):
            if mod is None:
                continue
            lp0 = float(mod.log_posterior_batch(packed, z0[None])[0])
            if kernel == "log_posterior_batch":
                row[f"{name}_s"] = median_time(lambda: mod.log_posterior_batch(packed, Z), repeat)
            else:
                row[f"{name}_s"] = median_time(lambda: mod.rwm_run(packed, z0, lp0, chol, normals, log_u), repeat)
        if "compiled_s" in row:
            row["speedup"] = row["python_s"] / row["compiled_s"]
        results.append(row)
    return results


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--batch", type=int, default=10_000, help="points per log-posterior call")
    parser.add_argument("--chain", type=int, default=2_000, help="random-walk steps per chain")
    args = parser.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; timing the Python backend only")
    for d, n in SHAPES:
        for row in bench_shape(d, n, args.repeat, args.batch, args.chain):
            print(json.dumps(row))


if __name__ == "__main__":
    main()
