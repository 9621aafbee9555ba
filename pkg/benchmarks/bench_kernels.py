"""Compare the compiled and pure-Python kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from msdistill import numerics as nx
from msdistill import similarity as sim


def cases(rng):
    v = rng.integers(0, 50, size=2000).astype(float)
    a, b = rng.standard_normal(400), rng.standard_normal(400)
    rows = rng.standard_normal((300, 32))
    labels = rng.integers(0, 5, size=300)
    probe = sim.ProbeSet.from_labels(rows, labels)
    rep = sim.SourceRepresentation("feature", rows)
    return {
        "rank_transform n=2000": lambda: nx.rank_transform(v),
        "kendall_tau n=400": lambda: nx.kendall_tau(a, b),
        "pairwise_pearson_distance 300x32": lambda: nx.pairwise_pearson_distance(rows),
        "parc n=300": lambda: sim.parc(rep, probe),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = nx.available_backends()
    print(f"{'kernel':36s}" + "".join(f"{b:>14s}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for name, fn in cases(np.random.default_rng(0)).items():
        times = []
        for backend in backends:
            with nx.use_backend(backend):
                fn()
                times.append(min(timeit.repeat(fn, number=1, repeat=args.repeat)))
        line = f"{name:36s}" + "".join(f"{t * 1e3:12.2f}ms" for t in times)
        if len(times) > 1:
            line += f"   {times[backends.index('python')] / times[backends.index('compiled')]:7.1f}x"
        print(line)


if __name__ == "__main__":
    main()
