"""Benchmark the compiled kernels against the NumPy fallback.

Times the per-element assembly kernels and the CSR matvec on a structured
mesh, then one full Newton state solve per backend. Run:

    python benchmarks/kernel_bench.py --n 128 --repeats 20
"""

import argparse
import time

import numpy as np


def _best_of(repeats, fn, *args):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=128, help="mesh subdivisions per side")
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    from bilotrack._kernels import pure

    backends = {"pure": pure}
    try:
        from bilotrack._kernels import _core

        backends["compiled"] = _core
    except ImportError:
        print("compiled extension not available; benchmarking the fallback only")

    from bilotrack.geometry import build_structured_mesh, quadrature_rule
    from bilotrack.pde import QUAD_DEGREE, make_nonlinearity, solve_state

    mesh = build_structured_mesh(args.n)
    rule = quadrature_rule(QUAD_DEGREE)
    lam = np.ascontiguousarray(rule.points)
    wq = np.ascontiguousarray(rule.weights)
    rng = np.random.default_rng(0)
    g = rng.standard_normal((mesh.num_triangles, len(wq)))
    cellvals = rng.standard_normal((mesh.num_triangles, 3))

    from bilotrack.pde import assemble_stiffness

    K = assemble_stiffness(mesh)
    x = rng.standard_normal(K.dim)

    print(
        "mesh n=%d: %d triangles, %d vertices, %d nonzeros"
        % (args.n, mesh.num_triangles, mesh.num_vertices, K.nnz)
    )
    rows = []
    for name, mod in backends.items():
        plan = mod.matvec_plan(K.indptr)
        rows.append(
            (
                name,
                _best_of(args.repeats, mod.weighted_mass_values, mesh.areas, g, lam, wq),
                _best_of(args.repeats, mod.weighted_load_values, mesh.areas, g, lam, wq),
                _best_of(
                    args.repeats, mod.scatter_add, mesh.triangles, cellvals, mesh.num_vertices
                ),
                _best_of(
                    args.repeats, mod.csr_matvec, plan, K.indptr, K.indices, K.data, x
                ),
            )
        )

    header = ("backend", "mass_vals", "load_vals", "scatter", "matvec")
    print("%-10s %12s %12s %12s %12s" % header)
    for name, *times in rows:
        print("%-10s" % name + "".join(" %9.3f ms" % (1e3 * t) for t in times))
    if len(rows) == 2:
        speedups = [rows[0][k] / rows[1][k] for k in range(1, 5)]
        print("%-10s" % "speedup" + "".join(" %11.2fx" % s for s in speedups))

    # end-to-end: one damped-Newton solve of the cubic benchmark per backend;
    # the solver modules look the kernels up per call, so swapping the
    # attributes of the dispatch module switches the backend in-process
    import bilotrack._kernels as kernels

    nl = make_nonlinearity("cubic")
    u = np.ones(mesh.num_triangles)
    for name, mod in backends.items():
        for attr in (
            "weighted_mass_values",
            "weighted_load_values",
            "scatter_add",
            "matvec_plan",
            "csr_matvec",
        ):
            setattr(kernels, attr, getattr(mod, attr))
        fresh = build_structured_mesh(args.n)  # drop cached matvec plans
        t0 = time.perf_counter()
        st = solve_state(fresh, nl, u, 1.0)
        print(
            "state solve [%s backend]: %.3f s (%d Newton iterations)"
            % (name, time.perf_counter() - t0, st.iterations)
        )


if __name__ == "__main__":
    main()
