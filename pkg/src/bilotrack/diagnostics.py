"""Convergence studies, finite-difference oracles, and regularity probes.

The regularity theory behind these probes is asymptotic with non-explicit
constants, so every check here reports bounded sequences or fitted
coefficients instead of claiming proofs: mesh studies verify the O(h^2)/O(h)
error decay expected from H2-regular states, the adjoint probe fits the
logarithmic growth of p near a tracking point against the two-dimensional
fundamental-solution coefficient |y(t) - y_t| / (2 pi), and the control
probe tracks H1 seminorms, local Lipschitz quotients away from the singular
points, and the decay of |y p| near them.
"""

from dataclasses import dataclass

import numpy as np

from .control import OptimizerConfig, ReducedCost, projected_gradient_solve
from .errors import NoConvergenceError
from .geometry import boundary_distance, build_structured_mesh, quadrature_rule
from .pde import (
    h1_seminorm_nodal,
    make_nonlinearity,
    point_values,
    solve_state,
)

__all__ = [
    "MANUFACTURED_CASES",
    "ConvergenceTable",
    "FdCheckResult",
    "SingularityFit",
    "RegularityReport",
    "manufactured_convergence_study",
    "fd_gradient_check",
    "fd_hessian_check",
    "adjoint_singularity_fit",
    "control_regularity_probe",
    "cellwise_to_nodal",
]


def _sin_product(x):
    return np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])


def _sin_product_grad(x):
    cx = np.cos(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
    cy = np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])
    return np.pi * np.column_stack([cx, cy])


def _zeros(x):
    return np.zeros(len(x))


# Each case fixes (nonlinearity, control, exact solution, forcing) so that
# the exact solution solves the state equation on the unit square.
MANUFACTURED_CASES = {
    "cubic": {
        "nonlinearity": "cubic",
        "control": 1.0,
        "exact": _sin_product,
        "exact_grad": _sin_product_grad,
        "forcing": lambda x: (
            2.0 * np.pi**2 * _sin_product(x) + _sin_product(x) ** 3 + _sin_product(x)
        ),
    },
    "linear": {
        "nonlinearity": "zero",
        "control": 0.0,
        "exact": _sin_product,
        "exact_grad": _sin_product_grad,
        "forcing": lambda x: 2.0 * np.pi**2 * _sin_product(x),
    },
    "zero": {
        "nonlinearity": "cubic",
        "control": 1.0,
        "exact": _zeros,
        "exact_grad": lambda x: np.zeros((len(x), 2)),
        "forcing": 0.0,
    },
}


@dataclass
class ConvergenceTable:
    """Per-level errors of a manufactured study with observed rates."""

    case: str
    levels: list
    h_max: list
    error_l2: list
    error_h1: list

    def rates(self, errors):
        e = np.asarray(errors)
        return [float(r) for r in np.log2(e[:-1] / e[1:])]

    @property
    def rates_l2(self):
        return self.rates(self.error_l2)

    @property
    def rates_h1(self):
        return self.rates(self.error_h1)

    def to_csv(self, path):
        rl2 = [float("nan")] + self.rates_l2
        rh1 = [float("nan")] + self.rates_h1
        with open(path, "w") as fh:
            fh.write("n,h_max,error_l2,error_h1semi,rate_l2,rate_h1semi\n")
            for row in zip(self.levels, self.h_max, self.error_l2, self.error_h1, rl2, rh1):
                fh.write(",".join(format(v, ".17g") for v in row) + "\n")

    def summary_text(self):
        lines = ["manufactured convergence study (%s case)" % self.case]
        for i, n in enumerate(self.levels):
            lines.append(
                "  n=%-4d h=%.4e  L2 %.6e  H1 %.6e"
                % (n, self.h_max[i], self.error_l2[i], self.error_h1[i])
            )
        if len(self.levels) > 1:
            lines.append(
                "  observed rates: L2 %s, H1 %s"
                % (
                    ["%.3f" % r for r in self.rates_l2],
                    ["%.3f" % r for r in self.rates_h1],
                )
            )
        return "\n".join(lines)


def _errors_vs_exact(mesh, y, exact, exact_grad):
    # integrate with the 6-point rule: the integrands are smooth, so the
    # measurement error stays far below the discretization error
    rule = quadrature_rule(3)
    lam, wq = rule.points, rule.weights
    verts = mesh.vertices[mesh.triangles]
    xq = np.einsum("qi,tix->tqx", lam, verts).reshape(-1, 2)
    diff = (y[mesh.triangles] @ lam.T).ravel() - exact(xq)
    l2 = np.sqrt(
        np.sum(2.0 * mesh.areas * (diff.reshape(-1, len(wq)) ** 2 @ wq))
    )
    gh = np.einsum("ti,tid->td", y[mesh.triangles], mesh.grads)
    gdiff = np.repeat(gh, len(wq), axis=0) - exact_grad(xq)
    g2 = np.einsum("nd,nd->n", gdiff, gdiff).reshape(-1, len(wq))
    h1 = np.sqrt(np.sum(2.0 * mesh.areas * (g2 @ wq)))
    return float(l2), float(h1)


def manufactured_convergence_study(levels, case="cubic", domain=(0.0, 0.0, 1.0, 1.0),
                                   newton=None, linear=None):
    """State-equation error study against an analytic solution.

    ``levels`` must contain at least three mesh sizes, each doubling the
    previous one, so the observed rates correspond to successive halvings
    of h.
    """
    levels = [int(n) for n in levels]
    if len(levels) < 3:
        raise ValueError("need at least three levels")
    if any(b != 2 * a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must double: got %r" % (levels,))
    if case not in MANUFACTURED_CASES:
        raise ValueError(
            "unknown case %r (have %s)" % (case, sorted(MANUFACTURED_CASES))
        )
    spec = MANUFACTURED_CASES[case]
    nl = make_nonlinearity(spec["nonlinearity"])
    table = ConvergenceTable(case=case, levels=levels, h_max=[], error_l2=[], error_h1=[])
    for n in levels:
        mesh = build_structured_mesh(n, domain)
        u = np.full(mesh.num_triangles, float(spec["control"]))
        try:
            st = solve_state(mesh, nl, u, spec["forcing"], newton=newton, linear=linear)
        except NoConvergenceError as exc:
            raise NoConvergenceError(
                "level n=%d: %s" % (n, exc), residual=exc.residual, history=exc.history
            ) from exc
        l2, h1 = _errors_vs_exact(mesh, st.y, spec["exact"], spec["exact_grad"])
        table.h_max.append(mesh.h_max)
        table.error_l2.append(l2)
        table.error_h1.append(h1)
    return table


@dataclass
class FdCheckResult:
    """Central-difference oracle table for one (u, h) pair."""

    kind: str  # "gradient" or "hessian"
    analytic: float
    eps: list
    fd: list
    rel_errors: list
    target: float

    @property
    def best_error(self):
        return min(self.rel_errors)

    @property
    def achieved(self):
        return self.best_error <= self.target

    def decade_orders(self):
        """Observed order between successive eps values."""
        out = []
        for i in range(len(self.eps) - 1):
            e0, e1 = self.rel_errors[i], self.rel_errors[i + 1]
            if e0 > 0 and e1 > 0:
                out.append(
                    float(np.log(e0 / e1) / np.log(self.eps[i] / self.eps[i + 1]))
                )
            else:
                out.append(float("inf"))
        return out

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("eps,analytic,fd,rel_error\n")
            for e, f_, r in zip(self.eps, self.fd, self.rel_errors):
                fh.write(
                    "%s,%s,%s,%s\n"
                    % tuple(format(v, ".17g") for v in (e, self.analytic, f_, r))
                )


def _require_admissible_sweep(problem, u, h, eps_list):
    a0 = problem.nonlinearity.a0
    for eps in eps_list:
        for sgn in (+1.0, -1.0):
            cand = np.asarray(u) + sgn * eps * np.asarray(h)
            worst = a0 + float(np.min(cand))
            if worst < 0.0:
                raise ValueError(
                    "perturbed control at eps=%g violates the coercivity bound "
                    "a0 + u >= 0 (a0=%g, min u=%g); shrink h or eps"
                    % (eps, a0, float(np.min(cand)))
                )


def fd_gradient_check(problem, u, h, eps_list, target=1e-4):
    """Compare the assembled derivative pairing with central differences."""
    u = np.asarray(u, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    eps_list = list(eps_list)
    _require_admissible_sweep(problem, u, h, eps_list)
    rc = ReducedCost(problem, cache_size=4)
    analytic = rc.directional(rc.gradient(u), h)
    fd, rel = [], []
    for eps in eps_list:
        val = (rc.cost(u + eps * h) - rc.cost(u - eps * h)) / (2.0 * eps)
        fd.append(float(val))
        rel.append(abs(val - analytic) / (abs(analytic) + 1e-14))
    return FdCheckResult(
        kind="gradient", analytic=float(analytic), eps=eps_list, fd=fd,
        rel_errors=rel, target=target,
    )


def fd_hessian_check(problem, u, h, eps_list, target=1e-3):
    """Compare j''(u)(h, h) with the second central difference of j."""
    u = np.asarray(u, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    eps_list = list(eps_list)
    _require_admissible_sweep(problem, u, h, eps_list)
    rc = ReducedCost(problem, cache_size=4)
    analytic = rc.hessian_pair(u, h, h)
    j0 = rc.cost(u)
    fd, rel = [], []
    for eps in eps_list:
        val = (rc.cost(u + eps * h) - 2.0 * j0 + rc.cost(u - eps * h)) / eps**2
        fd.append(float(val))
        rel.append(abs(val - analytic) / (abs(analytic) + 1e-14))
    return FdCheckResult(
        kind="hessian", analytic=float(analytic), eps=eps_list, fd=fd,
        rel_errors=rel, target=target,
    )


@dataclass
class SingularityFit:
    """Least-squares fit of |p| against log(1/rho) near a tracking point."""

    point: np.ndarray
    radii: list
    mean_abs_p: list
    slope: float
    intercept: float
    fit_residual: float
    reference_coefficient: float  # |y(t) - y_t| / (2 pi)

    def summary_text(self):
        lines = [
            "adjoint singularity fit at t=(%.4f, %.4f)" % tuple(self.point),
            "  fitted slope: %.6f  reference |y(t)-y_t|/(2 pi): %.6f"
            % (self.slope, self.reference_coefficient),
            "  fit residual (rms): %.3e" % self.fit_residual,
            "  samples (rho, mean |p|):",
        ]
        for r, s in zip(self.radii, self.mean_abs_p):
            lines.append("    %.6f  %.8e" % (r, s))
        return "\n".join(lines)


def _circle_means(mesh, nodal, center, radii, n_angles=16):
    ang = (np.arange(n_angles) + 0.5) * (2.0 * np.pi / n_angles)
    dirs = np.column_stack([np.cos(ang), np.sin(ang)])
    means = []
    for rho in radii:
        pts = np.asarray(center)[None, :] + rho * dirs
        means.append(float(np.mean(np.abs(point_values(mesh, nodal, pts)))))
    return means


def adjoint_singularity_fit(mesh, p, t, y_mismatch, radii):
    """Fit the log singularity of the adjoint around a missed tracking point.

    Radii must decrease strictly, stay at least 2*h_max (below that the mesh
    cannot resolve the singularity), and stay inside the domain. Averaging
    |p| over 16 angles per radius cancels the smooth harmonic part, so the
    fitted slope approaches the fundamental-solution coefficient
    |y(t) - y_t| / (2 pi).
    """
    t = np.asarray(t, dtype=np.float64)
    radii = [float(r) for r in radii]
    if any(b >= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be strictly decreasing")
    if min(radii) < 2.0 * mesh.h_max:
        raise ValueError(
            "smallest radius %.4g is below the resolvable scale 2*h_max=%.4g"
            % (min(radii), 2.0 * mesh.h_max)
        )
    if max(radii) >= boundary_distance(mesh, t):
        raise ValueError("largest radius reaches the boundary")
    means = _circle_means(mesh, p, t, radii)
    x = np.log(1.0 / np.array(radii))
    A = np.column_stack([x, np.ones_like(x)])
    coef, res, *_ = np.linalg.lstsq(A, np.array(means), rcond=None)
    rms = float(np.sqrt(res[0] / len(radii))) if len(res) else 0.0
    return SingularityFit(
        point=t,
        radii=radii,
        mean_abs_p=means,
        slope=float(coef[0]),
        intercept=float(coef[1]),
        fit_residual=rms,
        reference_coefficient=abs(float(y_mismatch)) / (2.0 * np.pi),
    )


def cellwise_to_nodal(mesh, u):
    """Area-weighted nodal interpolant of a piecewise-constant field."""
    u = np.asarray(u, dtype=np.float64)
    tri = mesh.triangles.ravel()
    wsum = np.bincount(tri, weights=np.repeat(mesh.areas * u, 3), minlength=mesh.num_vertices)
    asum = np.bincount(tri, weights=np.repeat(mesh.areas, 3), minlength=mesh.num_vertices)
    return wsum / asum


def _adjacent_cell_pairs(mesh):
    tris = mesh.triangles
    edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    owner = np.tile(np.arange(mesh.num_triangles), 3)
    lo = edges.min(axis=1)
    hi = edges.max(axis=1)
    keys = lo * mesh.num_vertices + hi
    order = np.argsort(keys, kind="stable")
    keys, owner = keys[order], owner[order]
    shared = keys[:-1] == keys[1:]
    return np.column_stack([owner[:-1][shared], owner[1:][shared]])


@dataclass
class RegularityReport:
    """Multi-level control regularity and product-decay samples."""

    levels: list
    h1_seminorms: list
    lipschitz_quotients: list
    miss_points: list  # tracking points with nonzero residual at the optimum
    product_decay: list  # rows (level, point_index, rho, mean |y p|)
    decay_coefficient: float  # fitted C in |y p| <= C * rho (|log rho| + 1)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("n,h1_seminorm,lipschitz_quotient\n")
            for row in zip(self.levels, self.h1_seminorms, self.lipschitz_quotients):
                fh.write("%d,%s,%s\n" % (row[0], *(format(v, ".17g") for v in row[1:])))

    def summary_text(self):
        lines = ["control regularity probe"]
        for n, s, q in zip(self.levels, self.h1_seminorms, self.lipschitz_quotients):
            lines.append("  n=%-4d |u|_H1 = %.6e  max Lipschitz quotient = %.6e" % (n, s, q))
        if self.product_decay:
            lines.append(
                "  |y p| decay samples near missed points "
                "(fitted C for C*rho*(|log rho|+1): %.4e):" % self.decay_coefficient
            )
            for lev, k, rho, val in self.product_decay:
                lines.append("    n=%d t#%d rho=%.4f mean|y p|=%.6e" % (lev, k, rho, val))
        return "\n".join(lines)


def control_regularity_probe(make_problem, levels, config=None, radii=(0.2, 0.1, 0.05),
                             miss_tol=1e-8):
    """Optimize per level and probe the regularity of the optimal control.

    ``make_problem(n)`` must return the ControlProblem discretized with mesh
    parameter n. Reports the H1 seminorm of the nodal interpolant of the
    optimal control, the maximum finite-difference Lipschitz quotient over
    edge-adjacent cell pairs away from every missed tracking point, and
    samples of |y p| around those points. The exclusion radius is fixed
    across levels at twice the coarsest h_max (hence always >= 2*h_max):
    the Lipschitz statement being probed concerns balls of fixed radius,
    so shrinking the exclusion with the mesh would chase the singularity.
    Propagates optimization failures.
    """
    config = config or OptimizerConfig()
    report = RegularityReport(
        levels=[], h1_seminorms=[], lipschitz_quotients=[],
        miss_points=[], product_decay=[], decay_coefficient=0.0,
    )
    phis, vals = [], []
    exclusion = None
    for n in levels:
        problem = make_problem(n)
        mesh = problem.mesh
        if exclusion is None:
            exclusion = 2.0 * mesh.h_max
        run = projected_gradient_solve(problem, config)
        if not run.converged:
            raise NoConvergenceError(
                "optimizer did not converge at level n=%d (%s)" % (n, run.reason)
            )
        triple = run.triple
        u_cells = triple.u_cells
        report.levels.append(n)
        report.h1_seminorms.append(h1_seminorm_nodal(mesh, cellwise_to_nodal(mesh, u_cells)))

        miss = point_values(mesh, triple.y, problem.tracking.points) - problem.tracking.targets
        missed = [
            (k, problem.tracking.points[k])
            for k in range(len(problem.tracking))
            if abs(miss[k]) > miss_tol
        ]
        report.miss_points = [tuple(map(float, p)) for _, p in missed]

        pairs = _adjacent_cell_pairs(mesh)
        keep = np.ones(len(pairs), dtype=bool)
        for _, t in missed:
            for side in (0, 1):
                d = mesh.centroids[pairs[:, side]] - np.asarray(t)[None, :]
                keep &= np.hypot(d[:, 0], d[:, 1]) > exclusion
        if keep.any():
            d = mesh.centroids[pairs[keep, 0]] - mesh.centroids[pairs[keep, 1]]
            dist = np.hypot(d[:, 0], d[:, 1])
            quot = np.abs(u_cells[pairs[keep, 0]] - u_cells[pairs[keep, 1]]) / dist
            report.lipschitz_quotients.append(float(quot.max()))
        else:
            report.lipschitz_quotients.append(0.0)

        yp = triple.y * triple.p
        for k, t in missed:
            usable = [r for r in radii if r >= 2.0 * mesh.h_max and r < boundary_distance(mesh, t)]
            means = _circle_means(mesh, yp, t, usable)
            for rho, val in zip(usable, means):
                report.product_decay.append((n, k, float(rho), val))
                phis.append(rho * (abs(np.log(rho)) + 1.0))
                vals.append(val)
    if phis:
        phis = np.asarray(phis)
        vals = np.asarray(vals)
        report.decay_coefficient = float(phis @ vals / (phis @ phis))
    return report
