"""Compare the compiled rough-path kernels with the NumPy fallback.

Usage: python3 benchmarks/bench_kernels.py [--nodes 65 129 257] [--repeat 3]
"""

import argparse
import timeit

import numpy as np

from cnstn import _kernels_py as fallback
from cnstn.noise import lift_geometric, sample_brownian

try:
    from cnstn import _kernels as compiled
except ImportError:
    compiled = None


def cases(nodes: int, seed: int = 0):
    path = sample_brownian(2, 1.0, nodes - 1, seed)
    lift = lift_geometric(path)
    x = np.ascontiguousarray(path.values)
    second = np.ascontiguousarray(lift.second)
    return {
        "pvar_power": lambda m: m.pvar_power(x, 2.5),
        "control_table": lambda m: m.control_table(x, 2.5),
        "chen_defect": lambda m: m.chen_defect(x, second),
    }


def best(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, nargs="+", default=[65, 129, 257])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if compiled is None:
        print("compiled kernels not built; timing the fallback only")
    print(f"{'kernel':<14} {'nodes':>6} {'python [s]':>12} {'cython [s]':>12} {'speedup':>9} {'max diff':>10}")
    for nodes in args.nodes:
        for name, call in cases(nodes).items():
            tp = best(lambda: call(fallback), args.repeat)
            if compiled is None:
                print(f"{name:<14} {nodes:>6} {tp:>12.4g} {'-':>12} {'-':>9} {'-':>10}")
                continue
            tc = best(lambda: call(compiled), args.repeat)
            diff = float(np.max(np.abs(np.asarray(call(fallback)) - np.asarray(call(compiled)))))
            print(f"{name:<14} {nodes:>6} {tp:>12.4g} {tc:>12.4g} {tp / tc:>9.1f} {diff:>10.1e}")


if __name__ == "__main__":
    main()
