"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Workloads match the experiments: inner flow solves on the 40-agent
nonconvex scenario and DGD subsolves on its first outer iteration.
"""

import argparse
import time

import numpy as np

from discrn import graph, kernels, outer, problem
from discrn.inner import solve_inner


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--solves", type=int, default=20)
    args = ap.parse_args()
    if kernels.compiled is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e .` first")

    n, seed = 40, 0
    g = graph.random_connected_graph(n, 120, seed)
    sc = problem.make_nonconvex_scenario(n, seed)
    model = sc.models[0]
    x = np.zeros((n, 1))
    chis = outer.batch_chi(seed, 0, args.solves, sc)[:, 0, :]
    batch = outer.assemble_batch(x, 20, 0.1, sc, g, seed)
    gk, Hk = outer.empirical_derivatives(batch, x, sc)
    params = outer.SubmodelParams(kind="cubic")
    opts = outer.SubsolverOptions(tol=0.0, t_max=5000)

    rows = []
    for name in ("cython", "python"):
        t_inner = best_of(lambda: [solve_inner(x, c, 0.1, model, g, sc.p_ref, backend=name)
                                   for c in chis], args.repeat)
        t_dgd = best_of(lambda: outer.dgd_subsolve(params, x, g, gk, Hk, opts, backend=name),
                        args.repeat)
        rows.append((name, t_inner, t_dgd))

    print(f"{'backend':8s} {args.solves:3d} inner solves [ms]  5000 DGD steps [ms]")
    for name, a, b in rows:
        print(f"{name:8s} {a * 1e3:22.1f}  {b * 1e3:18.1f}")
    (_, a0, b0), (_, a1, b1) = rows
    print(f"speedup  {a1 / a0:22.1f}x {b1 / b0:18.1f}x")


if __name__ == "__main__":
    main()
