"""Reduced cost functional, box projection, optimality checks, and optimizer.

The reduced functional is j(u) = 1/2 sum_t (y_u(t) - y_t)^2 + alpha/2 |u|^2
over piecewise-constant controls. Its derivative density is

    pbar = alpha*u - cellavg(y p),

so first-order points satisfy the projection identity
u = clip(y p / alpha, lower, upper) cellwise, and the sign of pbar on the
active sets encodes the variational inequality. Both the gradient and the
Hessian pairing below are the exact derivatives of the assembled discrete
functional because every pairing reuses the assembly quadrature rule.

Controls may be tied together into macro-cells ("groups"): the optimizer then
works on group values, with gradients and norms aggregated by group area.
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import pde
from .pde import (
    LinearOptions,
    NewtonOptions,
    TrackingData,
    cell_average_product,
    point_values,
)

__all__ = [
    "ControlProblem",
    "ReducedCost",
    "KktTriple",
    "OptimizerConfig",
    "OptimizationReport",
    "CriticalConeMask",
    "SecondOrderSample",
    "FirstOrderReport",
    "eval_cost",
    "reduced_gradient",
    "project_box",
    "projected_gradient_solve",
    "optimize",
    "check_first_order",
    "build_critical_cone_mask",
    "sample_second_order",
    "FREE",
    "AT_LOWER",
    "AT_UPPER",
    "FORCED_ZERO",
]

FREE, AT_LOWER, AT_UPPER, FORCED_ZERO = 0, 1, 2, 3
_LABEL_NAMES = {FREE: "free", AT_LOWER: "at_lower", AT_UPPER: "at_upper", FORCED_ZERO: "forced_zero"}


@dataclass
class ControlProblem:
    """Everything defining one tracking-control problem on a fixed mesh."""

    mesh: object
    nonlinearity: object
    source: object  # scalar, callable on (N, 2) coords, or nodal array
    tracking: TrackingData
    alpha: float
    lower: float
    upper: float
    control_groups: np.ndarray = None  # (nt,) int group ids; None = one per cell
    newton: NewtonOptions = field(default_factory=NewtonOptions)
    linear: LinearOptions = field(default_factory=LinearOptions)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.lower < self.upper:
            raise ValueError("control bounds must satisfy lower < upper")
        if self.control_groups is not None:
            g = np.asarray(self.control_groups, dtype=np.int64)
            if g.shape != (self.mesh.num_triangles,):
                raise ValueError("control_groups needs one id per triangle")
            self.n_groups = int(g.max()) + 1
            if set(np.unique(g)) != set(range(self.n_groups)):
                raise ValueError("group ids must be 0..n_groups-1 without gaps")
            self.control_groups = g
            self.group_areas = np.bincount(
                g, weights=self.mesh.areas, minlength=self.n_groups
            )
        else:
            self.n_groups = self.mesh.num_triangles
            self.group_areas = self.mesh.areas

    def expand(self, u):
        """Group values -> cellwise control array."""
        u = np.asarray(u, dtype=np.float64)
        if self.control_groups is None:
            return u
        return u[self.control_groups]

    def reduce_density(self, cell_density):
        """Area-weighted group average of a cellwise density."""
        if self.control_groups is None:
            return cell_density
        sums = np.bincount(
            self.control_groups,
            weights=cell_density * self.mesh.areas,
            minlength=self.n_groups,
        )
        return sums / self.group_areas

    def control_norm(self, h):
        """L2 norm of a group-valued control direction."""
        return float(np.sqrt(np.sum(np.asarray(h) ** 2 * self.group_areas)))

    def midpoint_control(self):
        return np.full(self.n_groups, 0.5 * (self.lower + self.upper))


def eval_cost(mesh, y, u, tracking, alpha):
    """Tracking cost plus Tikhonov term; exact for cellwise-constant u."""
    miss = 0.0
    if len(tracking):
        res = point_values(mesh, y, tracking.points) - tracking.targets
        miss = float(res @ res)
    u = np.asarray(u, dtype=np.float64)
    return 0.5 * miss + 0.5 * alpha * float(np.sum(u**2 * mesh.areas))


def reduced_gradient(mesh, u, y, p, alpha):
    """Cellwise derivative density alpha*u - cellavg(y p)."""
    return alpha * np.asarray(u, dtype=np.float64) - cell_average_product(mesh, y, p)


def project_box(v, lower, upper):
    """Pointwise projection onto [lower, upper]; idempotent."""
    if not lower < upper:
        raise ValueError("projection requires lower < upper")
    return np.clip(np.asarray(v, dtype=np.float64), lower, upper)


@dataclass
class KktTriple:
    """Control/state/adjoint triple with the derivative density pbar."""

    u: np.ndarray  # group values
    u_cells: np.ndarray
    y: np.ndarray
    p: np.ndarray
    pbar: np.ndarray  # group values
    lower: float
    upper: float
    group_areas: np.ndarray


class ReducedCost:
    """Evaluates j, its gradient, and Hessian pairings, with caching.

    One bounded cache maps control bytes to the solved state (and adjoint,
    once requested), so repeated evaluations at the same control reuse the
    Newton solve and the assembled operator. Newton always warm-starts from
    the most recent state.
    """

    def __init__(self, problem, cache_size=8):
        self.problem = problem
        self._cache = OrderedDict()
        self._cache_size = cache_size
        self._last_y = None
        self.n_state_solves = 0

    def _entry(self, u):
        u = np.asarray(u, dtype=np.float64)
        key = u.tobytes()
        entry = self._cache.get(key)
        if entry is None:
            pr = self.problem
            result = pde.solve_state(
                pr.mesh,
                pr.nonlinearity,
                pr.expand(u),
                pr.source,
                newton=pr.newton,
                linear=pr.linear,
                y0=self._last_y,
            )
            self.n_state_solves += 1
            self._last_y = result.y
            entry = {"u": u.copy(), "state": result, "p": None}
            self._cache[key] = entry
            if len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        self._cache.move_to_end(key)
        return entry

    def state(self, u):
        return self._entry(u)["state"]

    def cost(self, u):
        pr = self.problem
        y = self.state(u).y
        return eval_cost(pr.mesh, y, pr.expand(u), pr.tracking, pr.alpha)

    def adjoint(self, u):
        entry = self._entry(u)
        if entry["p"] is None:
            pr = self.problem
            st = entry["state"]
            entry["p"] = pde.solve_adjoint(
                pr.mesh,
                pr.nonlinearity,
                pr.expand(entry["u"]),
                st.y,
                pr.tracking,
                operator=st.operator,
                linear=pr.linear,
            )
        return entry["p"]

    def gradient(self, u):
        """Group-valued derivative density pbar = alpha*u - avg(y p)."""
        pr = self.problem
        st = self.state(u)
        p = self.adjoint(u)
        dens = cell_average_product(pr.mesh, st.y, p)
        return pr.alpha * np.asarray(u, dtype=np.float64) - pr.reduce_density(dens)

    def directional(self, pbar, h):
        """Pairing j'(u)h = sum_g pbar_g h_g area_g."""
        return float(np.sum(pbar * h * self.problem.group_areas))

    def hessian_pair(self, u, h1, h2):
        """Second derivative pairing j''(u)(h1, h2).

        Solves for the sensitivity pair (z, eta) in direction h2 against the
        operator cached with the state, then contracts with h1.
        """
        pr = self.problem
        entry = self._entry(u)
        st = entry["state"]
        p = self.adjoint(u)
        h1 = np.asarray(h1, dtype=np.float64)
        h2c = pr.expand(np.asarray(h2, dtype=np.float64))
        z2 = pde.solve_linearized_state(
            pr.mesh, pr.nonlinearity, pr.expand(entry["u"]), st.y, h2c,
            operator=st.operator, linear=pr.linear,
        )
        eta2 = pde.solve_adjoint_sensitivity(
            pr.mesh, pr.nonlinearity, pr.expand(entry["u"]), st.y, p, h2c, z2,
            pr.tracking, operator=st.operator, linear=pr.linear,
        )
        dens = cell_average_product(pr.mesh, z2, p) + cell_average_product(
            pr.mesh, st.y, eta2
        )
        quad = pr.alpha * float(np.sum(h1 * np.asarray(h2) * pr.group_areas))
        return quad - float(np.sum(h1 * pr.reduce_density(dens) * pr.group_areas))

    def kkt(self, u):
        pr = self.problem
        st = self.state(u)
        p = self.adjoint(u)
        return KktTriple(
            u=np.asarray(u, dtype=np.float64).copy(),
            u_cells=pr.expand(u),
            y=st.y,
            p=p,
            pbar=self.gradient(u),
            lower=pr.lower,
            upper=pr.upper,
            group_areas=pr.group_areas,
        )


@dataclass(frozen=True)
class OptimizerConfig:
    """Projected gradient with Armijo backtracking along the projection arc."""

    stop_tol: float = 1e-7
    max_outer: int = 200
    initial_step: float = 1.0
    armijo_slope: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    step_growth: float = 2.0
    multistart: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.armijo_slope < 1.0:
            raise ValueError("armijo_slope must lie in (0, 1)")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtrack factor must lie in (0, 1)")
        if self.initial_step <= 0 or self.stop_tol <= 0:
            raise ValueError("initial_step and stop_tol must be positive")


@dataclass
class OptimizationReport:
    """Iterate trace and final triple of one projected-gradient run."""

    iterates: list  # rows (iteration, cost, residual, step)
    triple: KktTriple
    converged: bool
    reason: str
    n_state_solves: int
    start_index: int = 0

    @property
    def final_cost(self):
        return self.iterates[-1][1]

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iteration,cost,residual,step\n")
            for it, cost, res, step in self.iterates:
                fh.write(
                    "%d,%s,%s,%s\n"
                    % (
                        it,
                        format(cost, ".17g"),
                        format(res, ".17g"),
                        format(step, ".17g"),
                    )
                )

    def summary_text(self):
        lines = [
            "projected-gradient run (start %d)" % self.start_index,
            "  converged: %s (%s)" % (self.converged, self.reason),
            "  outer iterations: %d" % (len(self.iterates) - 1),
            "  state solves: %d" % self.n_state_solves,
            "  final cost: %.12e" % self.final_cost,
            "  final projection residual: %.3e" % self.iterates[-1][2],
        ]
        return "\n".join(lines)


def projected_gradient_solve(problem, config=None, u0=None, reduced=None, start_index=0):
    """Minimize the reduced cost over the box by projected gradient descent.

    Stops when the fixed-point residual |u - clip(avg(y p)/alpha)| (L2,
    area-weighted) drops below ``stop_tol``. Armijo backtracking guarantees
    monotone cost decrease on accepted steps. Budget exhaustion returns a
    non-converged report rather than raising.
    """
    config = config or OptimizerConfig()
    rc = reduced or ReducedCost(problem)
    pr = problem
    u = pr.midpoint_control() if u0 is None else np.asarray(u0, dtype=np.float64).copy()

    cost = rc.cost(u)
    step = config.initial_step
    iterates = []
    converged = False
    reason = "max_outer exhausted"
    last_step = 0.0
    for outer in range(config.max_outer + 1):
        pbar = rc.gradient(u)
        fixed_point = project_box(u - pbar / pr.alpha, pr.lower, pr.upper)
        residual = pr.control_norm(u - fixed_point)
        iterates.append((outer, cost, residual, last_step))
        if residual <= config.stop_tol:
            converged = True
            reason = "projection residual below stop_tol"
            break
        if outer == config.max_outer:
            break

        accepted = False
        for _ in range(config.max_backtracks + 1):
            cand = project_box(u - step * pbar, pr.lower, pr.upper)
            d = cand - u
            slope = rc.directional(pbar, d)
            if slope >= 0.0:
                step *= config.backtrack
                continue
            cand_cost = rc.cost(cand)
            # strict decrease: at the floating-point floor of j an equal
            # cost certifies nothing, so treat it as a failed probe
            if cand_cost < cost + config.armijo_slope * slope:
                accepted = True
                break
            step *= config.backtrack
        if not accepted:
            reason = "line search failed to decrease the cost"
            break
        u, cost, last_step = cand, cand_cost, step
        step *= config.step_growth

    triple = rc.kkt(u)
    return OptimizationReport(
        iterates=iterates,
        triple=triple,
        converged=converged,
        reason=reason,
        n_state_solves=rc.n_state_solves,
        start_index=start_index,
    )


def optimize(problem, config=None):
    """Multi-start driver: deterministic per-start seeds, best run returned.

    Start 0 uses the midpoint control; further starts draw group values
    uniformly from the box. Returns (best_report, all_reports), both ordered
    by start index.
    """
    config = config or OptimizerConfig()
    reports = []
    for s in range(max(1, config.multistart)):
        if s == 0:
            u0 = None
        else:
            rng = np.random.default_rng([config.seed, s])
            u0 = rng.uniform(problem.lower, problem.upper, size=problem.n_groups)
        reports.append(
            projected_gradient_solve(problem, config, u0=u0, start_index=s)
        )
    best = min(
        reports, key=lambda r: (not r.converged, r.final_cost, r.start_index)
    )
    return best, reports


@dataclass
class FirstOrderReport:
    """Violation counts of the stationarity sign conditions."""

    tol: float
    n_lower: int  # pbar < -tol although u sits at the lower bound
    n_upper: int  # pbar > tol although u sits at the upper bound
    n_interior: int  # |pbar| > tol although u is strictly inside
    labels: np.ndarray

    @property
    def passed(self):
        return self.n_lower == 0 and self.n_upper == 0 and self.n_interior == 0

    @property
    def total(self):
        return self.n_lower + self.n_upper + self.n_interior


def _binding_sets(u, lower, upper):
    bind_tol = 1e-12 * (upper - lower)
    at_lower = u <= lower + bind_tol
    at_upper = u >= upper - bind_tol
    return at_lower, at_upper


def check_first_order(triple, tol):
    """Count sign-condition violations of the variational inequality."""
    u, pbar = triple.u, triple.pbar
    at_lower, at_upper = _binding_sets(u, triple.lower, triple.upper)
    interior = ~(at_lower | at_upper)
    labels = np.full(len(u), FREE)
    labels[at_lower] = AT_LOWER
    labels[at_upper] = AT_UPPER
    return FirstOrderReport(
        tol=tol,
        n_lower=int(np.sum(at_lower & (pbar < -tol))),
        n_upper=int(np.sum(at_upper & (pbar > tol))),
        n_interior=int(np.sum(interior & (np.abs(pbar) > tol))),
        labels=labels,
    )


@dataclass
class CriticalConeMask:
    """Per-group classification of admissible second-order directions."""

    labels: np.ndarray  # FREE / AT_LOWER / AT_UPPER / FORCED_ZERO
    tau: float

    def counts(self):
        return {
            name: int(np.sum(self.labels == code))
            for code, name in _LABEL_NAMES.items()
        }

    @property
    def all_forced(self):
        return bool(np.all(self.labels == FORCED_ZERO))


def build_critical_cone_mask(u, pbar, tau, lower, upper):
    """Cone of critical directions: zero where |pbar| exceeds tau.

    tau = 0 reproduces the strict cone, with "nonzero pbar" meaning
    |pbar| > 1e-12 (machine tolerance for the assembled density).
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    u = np.asarray(u, dtype=np.float64)
    pbar = np.asarray(pbar, dtype=np.float64)
    threshold = tau if tau > 0 else 1e-12
    labels = np.full(len(u), FREE)
    at_lower, at_upper = _binding_sets(u, lower, upper)
    labels[at_lower] = AT_LOWER
    labels[at_upper] = AT_UPPER
    labels[np.abs(pbar) > threshold] = FORCED_ZERO
    return CriticalConeMask(labels=labels, tau=tau)


@dataclass
class SecondOrderSample:
    """Sampled curvature over the critical cone."""

    min_value: float
    argmin: np.ndarray
    n_samples: int
    vacuous: bool

    @property
    def mu_hat(self):
        """Empirical coercivity constant (no claim about the true one)."""
        return self.min_value


def sample_second_order(reduced, u, mask, n_samples, seed):
    """Minimum of j''(u)(h, h) over random unit-norm cone directions.

    Directions are drawn with a seeded generator, zeroed where the cone
    forces zero, sign-clipped on the active sets, and normalized to unit
    L2 norm. An entirely forced-zero cone reports a vacuous pass.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if mask.all_forced:
        return SecondOrderSample(
            min_value=np.inf, argmin=np.zeros(len(mask.labels)), n_samples=0, vacuous=True
        )
    pr = reduced.problem
    rng = np.random.default_rng(seed)
    best_val, best_h = np.inf, None
    for _ in range(n_samples):
        h = rng.standard_normal(len(mask.labels))
        h[mask.labels == FORCED_ZERO] = 0.0
        low = mask.labels == AT_LOWER
        up = mask.labels == AT_UPPER
        h[low] = np.abs(h[low])
        h[up] = -np.abs(h[up])
        norm = pr.control_norm(h)
        if norm == 0.0:
            continue
        h /= norm
        val = reduced.hessian_pair(u, h, h)
        if val < best_val:
            best_val, best_h = val, h.copy()
    return SecondOrderSample(
        min_value=float(best_val), argmin=best_h, n_samples=n_samples, vacuous=False
    )
