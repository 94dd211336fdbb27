"""State, adjoint, and sensitivity solves for the reaction-coefficient control PDE.

The state equation, with homogeneous Dirichlet conditions, is

    -lap(y) + a(x, y) + u*y = f   in the domain,  y = 0 on the boundary,

discretized with P1 elements; the control u is piecewise constant per
triangle. Every linearized problem (adjoint, state sensitivity z, second
sensitivity gamma, adjoint sensitivity eta) is governed by one operator

    A(u, y) = K + M(da/dy(., y) + u)

which is symmetric positive definite whenever a0 + u >= 0 cellwise. All
assembly uses a single fixed quadrature rule so that the assembled Jacobian
is the exact derivative of the assembled residual; this makes the discrete
adjoint identity and every finite-difference oracle hold to solver precision.
"""

import weakref
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import NoConvergenceError, NonlinearityEvaluationError
from .geometry import dirac_load_vector, locate_point, quadrature_rule
from .sparse import SparseMatrix, TripletPattern, solve_direct, solve_spd

__all__ = [
    "QUAD_DEGREE",
    "Nonlinearity",
    "make_nonlinearity",
    "check_nonlinearity",
    "TrackingData",
    "NewtonOptions",
    "LinearOptions",
    "StateResult",
    "assemble_stiffness",
    "assemble_weighted_mass",
    "assemble_semilinear_residual",
    "build_operator",
    "solve_state",
    "solve_adjoint",
    "solve_linearized_state",
    "solve_second_sensitivity",
    "solve_adjoint_sensitivity",
    "point_values",
    "cell_average_product",
    "l2_norm_cellwise",
    "l2_norm_nodal",
    "h1_seminorm_nodal",
]

# one rule for every bilinear form and load keeps the scheme exactly
# differentiable in (u, y); do not mix degrees within a solve chain
QUAD_DEGREE = 2


@dataclass(frozen=True)
class Nonlinearity:
    """Reaction term a(x, y) with its first two y-derivatives.

    Callbacks receive x as an (N, 2) coordinate array and y as an (N,)
    array and return (N,) values. ``a0`` is the constant lower bound for
    da/dy required by the monotonicity assumption.
    """

    label: str
    value: callable
    dy: callable
    dyy: callable
    a0: float = 0.0


def make_nonlinearity(label, coefficient=None):
    """Built-in catalog: ``zero``, ``cubic``, ``atan``, ``linear_shift``."""
    if label == "zero":
        return Nonlinearity(
            "zero",
            lambda x, y: np.zeros_like(y),
            lambda x, y: np.zeros_like(y),
            lambda x, y: np.zeros_like(y),
            a0=0.0,
        )
    if label == "cubic":
        return Nonlinearity(
            "cubic",
            lambda x, y: y**3,
            lambda x, y: 3.0 * y**2,
            lambda x, y: 6.0 * y,
            a0=0.0,
        )
    if label == "atan":
        return Nonlinearity(
            "atan",
            lambda x, y: np.arctan(y),
            lambda x, y: 1.0 / (1.0 + y**2),
            lambda x, y: -2.0 * y / (1.0 + y**2) ** 2,
            a0=0.0,
        )
    if label == "linear_shift":
        c = -0.5 if coefficient is None else float(coefficient)
        return Nonlinearity(
            "linear_shift",
            lambda x, y: c * y,
            lambda x, y: np.full_like(y, c),
            lambda x, y: np.zeros_like(y),
            a0=c,
        )
    raise ValueError("unknown nonlinearity label %r" % label)


def check_nonlinearity(nl, points=None, y_max=10.0, n_y=41, rtol=1e-6):
    """Sampled verification of the structural assumptions on ``a``.

    Checks (i) central differences of ``value`` match ``dy`` to ``rtol``
    relative on |y| <= y_max, (ii) dy >= a0 at all samples, (iii) dy and dyy
    are finite and bounded on the sampled range. Returns the list of
    violations (empty when all hold).
    """
    if points is None:
        g = np.linspace(0.1, 0.9, 5)
        points = np.array([(a, b) for a in g for b in g])
    ys = np.linspace(-y_max, y_max, n_y)
    x = np.repeat(points, len(ys), axis=0)
    y = np.tile(ys, len(points))
    violations = []
    try:
        val_p, val_m = None, None
        step = 1e-6 * max(1.0, y_max)
        val_p = np.asarray(nl.value(x, y + step), dtype=float)
        val_m = np.asarray(nl.value(x, y - step), dtype=float)
        dy = np.asarray(nl.dy(x, y), dtype=float)
        dyy = np.asarray(nl.dyy(x, y), dtype=float)
    except Exception as exc:  # noqa: BLE001 - reported as a config violation
        return ["nonlinearity %r raised during sampling: %s" % (nl.label, exc)]
    if not (
        np.all(np.isfinite(val_p))
        and np.all(np.isfinite(val_m))
        and np.all(np.isfinite(dy))
        and np.all(np.isfinite(dyy))
    ):
        violations.append("nonlinearity %r produced non-finite samples" % nl.label)
        return violations
    fd = (val_p - val_m) / (2.0 * step)
    scale = np.maximum(np.abs(dy), 1.0)
    worst = np.max(np.abs(fd - dy) / scale)
    if worst > rtol:
        violations.append(
            "d(a)/dy inconsistent with sampled finite differences "
            "(worst relative error %.2e > %.0e)" % (worst, rtol)
        )
    if np.min(dy) < nl.a0 - 1e-9 * max(1.0, abs(nl.a0)):
        violations.append(
            "d(a)/dy dips below its declared lower bound a0=%g "
            "(sampled min %.6g)" % (nl.a0, float(np.min(dy)))
        )
    return violations


@dataclass(frozen=True)
class TrackingData:
    """Ordered tracking points and target values."""

    points: np.ndarray  # (m, 2)
    targets: np.ndarray  # (m,)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if pts.size == 0:
            pts = pts.reshape(0, 2)
        tgt = np.atleast_1d(np.asarray(self.targets, dtype=np.float64))
        if pts.shape[1] != 2 or len(pts) != len(tgt):
            raise ValueError("tracking needs (m, 2) points and m targets")
        if len(pts) > 1:
            d = pts[:, None, :] - pts[None, :, :]
            dist = np.hypot(d[..., 0], d[..., 1])
            np.fill_diagonal(dist, np.inf)
            if dist.min() == 0.0:
                raise ValueError("tracking points must be pairwise distinct")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "targets", tgt)

    def __len__(self):
        return len(self.targets)


@dataclass(frozen=True)
class NewtonOptions:
    tol: float = 1e-11  # sup-norm of the residual
    max_iter: int = 30
    max_halvings: int = 10


@dataclass(frozen=True)
class LinearOptions:
    tol: float = 1e-12
    max_iter: int = 20000
    method: str = "cg"  # "cg" or "direct"


@dataclass
class StateResult:
    """Converged state plus the operator shared by the linearized solves."""

    y: np.ndarray
    iterations: int
    converged: bool
    residual_history: list
    operator: SparseMatrix


class _Workspace:
    """Per-mesh assembly cache: quadrature geometry and frozen CSR patterns."""

    def __init__(self, mesh):
        self.mesh = mesh
        rule = quadrature_rule(QUAD_DEGREE)
        self.lam = np.ascontiguousarray(rule.points)
        self.wq = np.ascontiguousarray(rule.weights)
        tris = mesh.triangles
        verts = mesh.vertices[tris]  # (nt, 3, 2)
        self.xq = np.einsum("qi,tix->tqx", self.lam, verts).reshape(-1, 2)
        self.nq = len(self.wq)

        local = np.arange(3)
        self.rows = tris[:, np.repeat(local, 3)].ravel()
        self.cols = tris[:, np.tile(local, 3)].ravel()
        self.stiff_vals = (
            np.einsum("tid,tjd->tij", mesh.grads, mesh.grads)
            * mesh.areas[:, None, None]
        ).reshape(-1, 9)
        self.full_pattern = TripletPattern(mesh.num_vertices, self.rows, self.cols)

        free = mesh.interior_mask
        self.elim_keep = free[self.rows] & free[self.cols]
        bdry = np.flatnonzero(mesh.boundary_flags)
        self.elim_pattern = TripletPattern(
            mesh.num_vertices,
            np.concatenate([self.rows[self.elim_keep], bdry]),
            np.concatenate([self.cols[self.elim_keep], bdry]),
        )
        self._bdry_ones = np.ones(len(bdry))
        self._stiff_kept = self.stiff_vals.ravel()[self.elim_keep]

    def interp(self, nodal):
        # nodal (nv,) -> values at quadrature points, (nt, nq)
        return nodal[self.mesh.triangles] @ self.lam.T

    def mass_values(self, g):
        return _kernels.weighted_mass_values(self.mesh.areas, g, self.lam, self.wq)

    def load(self, g):
        cellvals = _kernels.weighted_load_values(self.mesh.areas, g, self.lam, self.wq)
        return _kernels.scatter_add(
            self.mesh.triangles, cellvals, self.mesh.num_vertices
        )

    def eliminated_operator(self, weight_at_quad):
        mvals = self.mass_values(weight_at_quad).ravel()[self.elim_keep]
        vals = np.concatenate([self._stiff_kept + mvals, self._bdry_ones])
        return self.elim_pattern.assemble(vals, symmetric=True)


_workspaces = weakref.WeakKeyDictionary()


def _workspace(mesh):
    ws = _workspaces.get(mesh)
    if ws is None:
        ws = _Workspace(mesh)
        _workspaces[mesh] = ws
    return ws


def _eval_nl(fn, x, y, what):
    out = np.asarray(fn(x, y.ravel()), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NonlinearityEvaluationError(
            "%s produced non-finite values during assembly" % what
        )
    return out.reshape(y.shape)


def _source_at_quad(ws, f):
    if callable(f):
        vals = np.asarray(f(ws.xq), dtype=np.float64).reshape(-1, ws.nq)
    elif np.isscalar(f):
        vals = np.full((ws.mesh.num_triangles, ws.nq), float(f))
    else:
        f = np.asarray(f, dtype=np.float64)
        if f.shape != (ws.mesh.num_vertices,):
            raise ValueError("source must be scalar, callable, or nodal array")
        vals = ws.interp(f)
    if not np.all(np.isfinite(vals)):
        raise NonlinearityEvaluationError("source evaluation produced non-finite values")
    return vals


def _check_admissible(nl, u):
    slack = nl.a0 + np.min(u)
    if slack < -1e-12 * max(1.0, abs(nl.a0), float(np.max(np.abs(u)))):
        raise ValueError(
            "control is outside the coercivity set: min(a0 + u) = %.3e < 0" % slack
        )


def _zero_boundary(mesh, vec):
    vec[mesh.boundary_flags] = 0.0
    return vec


def _linear_solve(A, rhs, linear):
    if linear.method == "direct":
        return solve_direct(A, rhs)
    return solve_spd(A, rhs, tol=linear.tol, max_iter=linear.max_iter)


def assemble_stiffness(mesh):
    """Full (un-eliminated) P1 stiffness matrix; zero row sums, symmetric."""
    ws = _workspace(mesh)
    return ws.full_pattern.assemble(ws.stiff_vals, symmetric=True)


def assemble_weighted_mass(mesh, w):
    """Weighted mass matrix ``int w phi_i phi_j`` for cellwise or nodal ``w``."""
    ws = _workspace(mesh)
    w = np.asarray(w, dtype=np.float64)
    if w.shape == (mesh.num_triangles,):
        g = np.repeat(w[:, None], ws.nq, axis=1)
    elif w.shape == (mesh.num_vertices,):
        g = ws.interp(w)
    else:
        raise ValueError(
            "weight must be cellwise (%d,) or nodal (%d,), got %r"
            % (mesh.num_triangles, mesh.num_vertices, w.shape)
        )
    return ws.full_pattern.assemble(ws.mass_values(g), symmetric=True)


def _jacobian_weight(ws, nl, u, yq):
    return _eval_nl(nl.dy, ws.xq, yq, "da/dy") + u[:, None]


def build_operator(mesh, nl, u, y):
    """K + M(da/dy(., y) + u) with Dirichlet rows/columns eliminated."""
    ws = _workspace(mesh)
    yq = ws.interp(y)
    return ws.eliminated_operator(_jacobian_weight(ws, nl, u, yq))


def assemble_semilinear_residual(mesh, nl, y, u, f):
    """Weak residual of the state equation; boundary entries are zeroed."""
    ws = _workspace(mesh)
    yq = ws.interp(y)
    g = _eval_nl(nl.value, ws.xq, yq, "a(., y)") + u[:, None] * yq - _source_at_quad(ws, f)
    K = ws.full_pattern.assemble(ws.stiff_vals, symmetric=True)
    res = K.matvec(y) + ws.load(g)
    return _zero_boundary(mesh, res)


def solve_state(mesh, nl, u, f, newton=None, linear=None, y0=None):
    """Damped Newton solve of the discrete semilinear state equation.

    The iteration starts from y = 0 (or ``y0``), solves with the SPD
    Jacobian K + M(da/dy + u), and halves the step until the residual
    sup-norm decreases. Raises NoConvergenceError with the residual history
    if the budget is exhausted.
    """
    newton = newton or NewtonOptions()
    linear = linear or LinearOptions()
    u = np.asarray(u, dtype=np.float64)
    _check_admissible(nl, u)
    ws = _workspace(mesh)

    y = np.zeros(mesh.num_vertices) if y0 is None else _zero_boundary(mesh, np.array(y0, dtype=np.float64))
    fq = _source_at_quad(ws, f)
    K = ws.full_pattern.assemble(ws.stiff_vals, symmetric=True)

    def residual(yv):
        yq = ws.interp(yv)
        g = _eval_nl(nl.value, ws.xq, yq, "a(., y)") + u[:, None] * yq - fq
        return _zero_boundary(mesh, K.matvec(yv) + ws.load(g)), yq

    res, yq = residual(y)
    history = [float(np.max(np.abs(res)))]
    iterations = 0
    # Newton steps are solved relative to the current residual, so a modest
    # relative tolerance suffices and avoids asking CG for more digits than
    # the conditioning permits on fine meshes
    step_linear = LinearOptions(
        tol=max(linear.tol, 1e-9), max_iter=linear.max_iter, method=linear.method
    )
    while history[-1] > newton.tol:
        if iterations >= newton.max_iter:
            raise NoConvergenceError(
                "Newton did not reach tol=%.1e in %d iterations (residual %.3e)"
                % (newton.tol, newton.max_iter, history[-1]),
                residual=history[-1],
                history=history,
            )
        A = ws.eliminated_operator(_jacobian_weight(ws, nl, u, yq))
        try:
            delta = _linear_solve(A, -res, step_linear)
        except ValueError:
            delta = solve_direct(A, -res)  # near-indefinite step fallback
        step = 1.0
        for _ in range(newton.max_halvings + 1):
            y_trial = y + step * delta
            res_trial, yq_trial = residual(y_trial)
            norm_trial = float(np.max(np.abs(res_trial)))
            if norm_trial < history[-1]:
                break
            step *= 0.5
        else:
            raise NoConvergenceError(
                "Newton line search stalled at residual %.3e" % history[-1],
                residual=history[-1],
                history=history,
            )
        y, res, yq = y_trial, res_trial, yq_trial
        history.append(norm_trial)
        iterations += 1

    operator = ws.eliminated_operator(_jacobian_weight(ws, nl, u, yq))
    return StateResult(
        y=y,
        iterations=iterations,
        converged=True,
        residual_history=history,
        operator=operator,
    )


def point_values(mesh, nodal, points):
    """Evaluate a P1 nodal field at arbitrary interior points."""
    out = np.empty(len(points))
    for k, p in enumerate(np.atleast_2d(points)):
        loc = locate_point(mesh, p)
        out[k] = nodal[mesh.triangles[loc.triangle_index]] @ loc.lam
    return out


def _tracking_rhs(mesh, weights, tracking):
    rhs = np.zeros(mesh.num_vertices)
    for w, t in zip(weights, tracking.points):
        if w != 0.0:
            rhs += w * dirac_load_vector(mesh, t)
    return _zero_boundary(mesh, rhs)


def solve_adjoint(mesh, nl, u, y, tracking, operator=None, linear=None):
    """Adjoint state: A p = sum_t (y(t) - y_t) * delta_t.

    Identically zero when every tracking residual vanishes (empty miss set).
    """
    linear = linear or LinearOptions()
    if operator is None:
        operator = build_operator(mesh, nl, u, y)
    mism = point_values(mesh, y, tracking.points) - tracking.targets if len(tracking) else np.empty(0)
    rhs = _tracking_rhs(mesh, mism, tracking)
    return _linear_solve(operator, rhs, linear)


def solve_linearized_state(mesh, nl, u, y, h, operator=None, linear=None):
    """State sensitivity z in direction h: A z = -(h y, .)."""
    linear = linear or LinearOptions()
    ws = _workspace(mesh)
    if operator is None:
        operator = build_operator(mesh, nl, u, y)
    rhs = _zero_boundary(mesh, -ws.load(np.asarray(h)[:, None] * ws.interp(y)))
    return _linear_solve(operator, rhs, linear)


def solve_second_sensitivity(mesh, nl, u, y, h1, h2, z1, z2, operator=None, linear=None):
    """Second sensitivity: A g = -(h1 z2 + h2 z1, .) - (d2a/dy2 z1 z2, .)."""
    linear = linear or LinearOptions()
    ws = _workspace(mesh)
    if operator is None:
        operator = build_operator(mesh, nl, u, y)
    yq = ws.interp(y)
    z1q = ws.interp(z1)
    z2q = ws.interp(z2)
    g = (
        np.asarray(h1)[:, None] * z2q
        + np.asarray(h2)[:, None] * z1q
        + _eval_nl(nl.dyy, ws.xq, yq, "d2a/dy2") * z1q * z2q
    )
    rhs = _zero_boundary(mesh, -ws.load(g))
    return _linear_solve(operator, rhs, linear)


def solve_adjoint_sensitivity(
    mesh, nl, u, y, p, h, z, tracking, operator=None, linear=None
):
    """Adjoint sensitivity: A eta = sum_t z(t) delta_t - ((d2a/dy2 z + h) p, .)."""
    linear = linear or LinearOptions()
    ws = _workspace(mesh)
    if operator is None:
        operator = build_operator(mesh, nl, u, y)
    zt = point_values(mesh, z, tracking.points) if len(tracking) else np.empty(0)
    rhs = _tracking_rhs(mesh, zt, tracking)
    yq = ws.interp(y)
    g = (_eval_nl(nl.dyy, ws.xq, yq, "d2a/dy2") * ws.interp(z) + np.asarray(h)[:, None]) * ws.interp(p)
    rhs -= ws.load(g)
    return _linear_solve(operator, _zero_boundary(mesh, rhs), linear)


def cell_average_product(mesh, a_nodal, b_nodal):
    """Cellwise quadrature average of the product of two nodal fields."""
    ws = _workspace(mesh)
    return 2.0 * (ws.interp(a_nodal) * ws.interp(b_nodal)) @ ws.wq


def l2_norm_cellwise(mesh, u):
    """Exact L2 norm of a piecewise-constant field."""
    return float(np.sqrt(np.sum(np.asarray(u) ** 2 * mesh.areas)))


def l2_norm_nodal(mesh, v):
    """L2 norm of a P1 field via the quadrature rule (exact for P1)."""
    ws = _workspace(mesh)
    vq = ws.interp(v)
    return float(np.sqrt(np.sum(2.0 * mesh.areas * ((vq**2) @ ws.wq))))


def h1_seminorm_nodal(mesh, v):
    """H1 seminorm of a P1 field (elementwise constant gradients)."""
    gx = np.einsum("ti,tid->td", np.asarray(v)[mesh.triangles], mesh.grads)
    return float(np.sqrt(np.sum(mesh.areas * np.einsum("td,td->t", gx, gx))))
