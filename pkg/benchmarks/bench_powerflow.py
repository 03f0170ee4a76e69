"""Compare the numba sweep kernel with the numpy (BIBC matrix) fallback.

    python3 benchmarks/bench_powerflow.py [--repeat N] [--buses N]

Cases: the bundled 33-bus feeder, a long random radial feeder, and one
scenario-B GA run. The numba timings exclude JIT compilation (one warm-up
solve per case).
"""

import argparse
import time

import numpy as np

from llrm import _kernels, datasets
from llrm.ga import GaConfig, clear_market
from llrm.grid import Branch, Bus, Network
from llrm.market import SCENARIOS, MarketInstance
from llrm.powerflow import solve


def synthetic_feeder(n_bus, seed=0):
    """Mostly-chain radial feeder with light per-bus load so it stays solvable."""
    rng = np.random.default_rng(seed)
    buses = [Bus(1, 0.0, 0.0)]
    branches = []
    for k in range(2, n_bus + 1):
        p = float(rng.uniform(5, 30))
        buses.append(Bus(k, p, 0.5 * p))
        parent = k - 1 if rng.random() < 0.8 else int(rng.integers(1, k))
        branches.append(Branch(parent, k, float(rng.uniform(0.01, 0.05)),
                               float(rng.uniform(0.01, 0.05))))
    return Network(tuple(buses), tuple(branches))


def per_call(fn, repeat):
    fn()  # warm-up (JIT compile, cached topology)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=500)
    ap.add_argument("--buses", type=int, default=1000)
    args = ap.parse_args()

    backends = [b for b in ("numba", "numpy") if b != "numba" or _kernels.HAVE_NUMBA]
    net33, consumers, bids = datasets.load_ieee33()
    long = synthetic_feeder(args.buses)

    rows = []
    for label, net, repeat in (("33-bus solve", net33, args.repeat),
                               (f"{args.buses}-bus solve", long, max(10, args.repeat // 10))):
        times = {b: per_call(lambda: solve(net, backend=b), repeat) for b in backends}
        rows.append((label, times))

    times = {}
    for b in backends:
        inst = MarketInstance(net33, consumers, bids, backend=b)
        cfg = GaConfig(population_size=40, iterations=40, rng_seed=1, threads=1)
        t0 = time.perf_counter()
        clear_market(inst, request=SCENARIOS["B"], config=cfg)
        times[b] = time.perf_counter() - t0
    rows.append(("scenario B GA (pop 40, 40 it)", times))

    print(f"{'case':32s}" + "".join(f"{b:>14s}" for b in backends)
          + ("    speedup" if len(backends) == 2 else ""))
    for label, t in rows:
        cells = "".join(f"{t[b] * 1e3:12.3f}ms" for b in backends)
        extra = f"{t['numpy'] / t['numba']:10.1f}x" if len(backends) == 2 else ""
        print(f"{label:32s}{cells}{extra}")


if __name__ == "__main__":
    main()
