"""Discrete optimal transport for costs h(x - y) and potential recovery.

Three solvers share one result type: an exact 1-d solver built on monotone
rearrangement (the reference oracle), an exact transportation-simplex LP for
desk-scale instances in any dimension, and a log-domain entropic solver with
epsilon scaling for everything larger. All potentials can be canonicalized
by c-transforms, after which the transport map is assembled pointwise as
T(x) = x - grad_h_star(grad phi(x)).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import geometry
from .cost import RadialCost, grad_h, grad_h_star
from .errors import (
    CapacityError,
    ConvergenceError,
    DomainError,
    InputError,
    OTLabError,
    ParameterError,
    RangeError,
)
from .geometry import DensityField, Grid

__all__ = [
    "TransportResult",
    "MapField",
    "MapConsistencyReport",
    "c_transform",
    "canonical_pair",
    "solve_exact_1d",
    "solve_lp",
    "solve_entropic",
    "transport_map_from_potential",
    "map_consistency_check",
    "default_mass_threshold",
    "write_result_dir",
    "read_meta",
]

_FEASIBILITY_SLACK = 1e-9
_MARGINAL_TOL = 1e-8
_GAP_FLOOR = -1e-10
_LP_CAPACITY = 4096 * 4096


@dataclass(frozen=True)
class TransportResult:
    """Optimal coupling between two grid densities plus dual potentials.

    The coupling is dense (desk scale); phi lives on the source grid, psi on
    the target grid, both in cost units. The duality gap is primal - dual.
    """

    source: DensityField
    target: DensityField
    cost: RadialCost = field(repr=False)
    coupling: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)
    primal: float
    dual: float
    solver: str
    meta: dict = field(default_factory=dict, repr=False)

    @property
    def gap(self) -> float:
        return self.primal - self.dual

    def validate(self, check_pairs: bool = True) -> None:
        """Assert the coupling/potential contracts; raises on violation."""
        a = self.source.values.reshape(-1) * self.source.grid.cell_volume
        b = self.target.values.reshape(-1) * self.target.grid.cell_volume
        rows = self.coupling.sum(axis=1)
        cols = self.coupling.sum(axis=0)
        if np.abs(rows - a).max() > _MARGINAL_TOL:
            raise OTLabError(
                f"coupling row sums violate the source marginal by {np.abs(rows - a).max():.3e}"
            )
        if np.abs(cols - b).max() > _MARGINAL_TOL:
            raise OTLabError(
                f"coupling column sums violate the target marginal by {np.abs(cols - b).max():.3e}"
            )
        if self.gap < _GAP_FLOOR:
            raise OTLabError(f"duality gap {self.gap:.3e} is below {_GAP_FLOOR}")
        if check_pairs:
            cmat = _cost_matrix(self.cost, self.source.grid.cell_centers(), self.target.grid.cell_centers())
            worst = (
                self.phi.reshape(-1)[:, None] + self.psi.reshape(-1)[None, :] - cmat
            ).max()
            if worst > _FEASIBILITY_SLACK:
                raise OTLabError(
                    f"potentials violate phi + psi <= h by {worst:.3e}"
                )


@dataclass(frozen=True)
class MapField:
    """Transport map sampled at source cells, defined where mass is not negligible.

    ``points`` has one target point per source cell (row-major); entries off
    the mask carry the cell center itself and are meaningless. Map values are
    clipped to the box; the largest clip distance is kept for diagnostics.
    """

    grid: Grid
    points: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    max_clip_distance: float = 0.0

    def __post_init__(self):
        if self.points.shape != (self.grid.num_cells, self.grid.d):
            raise OTLabError("map points must be (num_cells, d)")
        if not np.all(self.grid.contains(self.points[self.mask])):
            raise OTLabError("masked map values must lie inside the box")


def default_mass_threshold(grid: Grid) -> float:
    """Cells with density at or below this carry negligible mass."""
    return 1e-10 / grid.cell_volume


def _cost_matrix(cost: RadialCost, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Dense matrix h(x_i - y_j); raises if any pair leaves the cost ball."""
    diff = xs[:, None, :] - ys[None, :, :]
    r = np.sqrt((diff**2).sum(axis=-1))
    if r.max() > cost.radius * (1.0 + 1e-9):
        raise DomainError(
            f"grid pair distance {r.max():.6g} exceeds the cost radius {cost.radius:.6g}"
        )
    return np.asarray(cost.profile(r), dtype=float)


def c_transform(cost: RadialCost, values, value_grid: Grid, eval_grid: Grid | None = None) -> np.ndarray:
    """Exact discrete c-transform: out(x) = min_y [h(x - y) - values(y)].

    ``values`` lives on ``value_grid``; the minimum is taken over its cells
    and evaluated at every cell of ``eval_grid`` (default: the same grid).
    Because h is radial the same function serves both transform directions.
    """
    eval_grid = eval_grid or value_grid
    vals = np.asarray(values, dtype=float).reshape(-1)
    if vals.size != value_grid.num_cells:
        raise OTLabError("values do not match the value grid")
    ys = value_grid.cell_centers()
    xs = eval_grid.cell_centers()
    out = np.empty(eval_grid.num_cells)
    block = max(1, int(2**22 // max(vals.size, 1)))  # cap the pairwise block size
    for start in range(0, xs.shape[0], block):
        cmat = _cost_matrix(cost, xs[start : start + block], ys)
        out[start : start + block] = (cmat - vals[None, :]).min(axis=1)
    return out.reshape(eval_grid.shape)


def canonical_pair(cost: RadialCost, phi, source_grid: Grid, target_grid: Grid):
    """One double c-transform: psi = min_x [h - phi], then phi = min_y [h - psi].

    The result is a feasible c-concave pair and a fixed point of the
    transform; applied to feasible dual variables it never lowers the dual
    objective.
    """
    psi = c_transform(cost, phi, source_grid, target_grid)
    phi_c = c_transform(cost, psi, target_grid, source_grid)
    return phi_c, psi


def _marginals(rho: DensityField, g: DensityField) -> tuple[np.ndarray, np.ndarray]:
    a = rho.values.reshape(-1) * rho.grid.cell_volume
    b = g.values.reshape(-1) * g.grid.cell_volume
    if abs(a.sum() - b.sum()) > _MARGINAL_TOL:
        raise InputError(
            f"marginal masses differ by {abs(a.sum() - b.sum()):.3e} (> {_MARGINAL_TOL})"
        )
    if a.sum() <= 0:
        raise InputError("marginals must carry positive mass")
    return a, b * (a.sum() / b.sum())


def _monotone_plan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Northwest-corner filling of sorted 1-d marginals: the monotone plan."""
    m, n = len(a), len(b)
    plan = np.zeros((m, n))
    ar = a.copy()
    br = b.copy()
    i = j = 0
    while True:
        move = min(ar[i], br[j])
        plan[i, j] = move
        ar[i] -= move
        br[j] -= move
        if i == m - 1 and j == n - 1:
            break
        if ar[i] == 0.0 and i < m - 1:
            i += 1
        elif j < n - 1:
            j += 1
        else:
            i += 1
    return plan


def solve_exact_1d(rho: DensityField, g: DensityField, cost: RadialCost,
                   mass_threshold: float | None = None) -> tuple[TransportResult, MapField]:
    """Exact 1-d transport by monotone rearrangement (quantile matching).

    Strict convexity of the cost along the line makes the monotone plan
    optimal for any cost in the family, so this doubles as the oracle the
    other solvers are tested against. The potential phi is recovered by
    integrating phi'(x) = h'(x - T(x)) from the left end (phi(left) = 0) and
    psi as the c-transform of phi, which keeps the pair feasible.
    """
    if rho.grid.d != 1 or g.grid.d != 1:
        raise DomainError("solve_exact_1d requires 1-d grids")
    a, b = _marginals(rho, g)
    xs = rho.grid.cell_centers()[:, 0]
    ys = g.grid.cell_centers()[:, 0]

    # cell-centered CDFs: half of a cell's own mass sits left of its center
    total = a.sum()
    fa = np.cumsum(a) - a / 2.0
    gb = np.cumsum(b) - b / 2.0
    gb_monotone = gb + np.arange(len(b)) * (1e-15 * max(total, 1.0))
    t_vals = np.interp(fa, gb_monotone, ys)

    plan = _monotone_plan(a, b)
    ii, jj = np.nonzero(plan)
    primal = float((plan[ii, jj] * cost.profile(np.abs(xs[ii] - ys[jj]))).sum())

    diff = xs - t_vals
    dphi = np.sign(diff) * np.asarray(cost.dprofile(np.abs(diff)), dtype=float)
    dx = rho.grid.spacing[0]
    phi = np.concatenate([[0.0], np.cumsum(0.5 * (dphi[1:] + dphi[:-1]) * dx)])
    psi = c_transform(cost, phi, rho.grid, g.grid).reshape(-1)
    dual = float(phi @ a + psi @ b)

    result = TransportResult(
        source=rho,
        target=g,
        cost=cost,
        coupling=plan,
        phi=phi.reshape(rho.grid.shape),
        psi=psi.reshape(g.grid.shape),
        primal=primal,
        dual=dual,
        solver="exact1d",
        meta={"plan_nonzeros": int(len(ii))},
    )
    result.validate()

    threshold = default_mass_threshold(rho.grid) if mass_threshold is None else mass_threshold
    mask = rho.values.reshape(-1) > threshold
    points = t_vals[:, None]
    clipped = rho.grid.clip(points)
    max_clip = float(np.abs(clipped - points).max()) if points.size else 0.0
    map_field = MapField(rho.grid, clipped, mask, max_clip)
    return result, map_field


class _TransportationSimplex:
    """Dense transportation-problem solver: NW-corner start, MODI pivoting.

    The basis is maintained as a spanning tree of the bipartite row/column
    graph; entering variables are picked by smallest reduced cost index and
    leaving ties broken by smallest index (Bland's rule, no cycling).
    """

    def __init__(self, cmat: np.ndarray, a: np.ndarray, b: np.ndarray):
        self.cmat = cmat
        self.m, self.n = cmat.shape
        self.x = _monotone_plan(a, b)
        self.basis: set[tuple[int, int]] = set()
        self.rows_adj: list[set[int]] = [set() for _ in range(self.m)]
        self.cols_adj: list[set[int]] = [set() for _ in range(self.n)]
        self._init_basis_from_nw_path(a, b)
        self.tol = 1e-11 * (1.0 + float(np.abs(cmat).max()))

    def _init_basis_from_nw_path(self, a, b):
        # replay the NW fill to collect the m+n-1 path cells (some may be 0)
        ar = a.copy()
        br = b.copy()
        i = j = 0
        while True:
            self._add(i, j)
            move = min(ar[i], br[j])
            ar[i] -= move
            br[j] -= move
            if i == self.m - 1 and j == self.n - 1:
                break
            if ar[i] == 0.0 and i < self.m - 1:
                i += 1
            elif j < self.n - 1:
                j += 1
            else:
                i += 1

    def _add(self, i, j):
        self.basis.add((i, j))
        self.rows_adj[i].add(j)
        self.cols_adj[j].add(i)

    def _remove(self, i, j):
        self.basis.discard((i, j))
        self.rows_adj[i].discard(j)
        self.cols_adj[j].discard(i)

    def duals(self) -> tuple[np.ndarray, np.ndarray]:
        """u_i + v_j = c_ij on the basis tree, anchored at u_0 = 0."""
        u = np.full(self.m, np.nan)
        v = np.full(self.n, np.nan)
        u[0] = 0.0
        stack = [("r", 0)]
        while stack:
            kind, k = stack.pop()
            if kind == "r":
                for j in self.rows_adj[k]:
                    if np.isnan(v[j]):
                        v[j] = self.cmat[k, j] - u[k]
                        stack.append(("c", j))
            else:
                for i in self.cols_adj[k]:
                    if np.isnan(u[i]):
                        u[i] = self.cmat[i, k] - v[k]
                        stack.append(("r", i))
        if np.isnan(u).any() or np.isnan(v).any():
            raise OTLabError("basis tree is not spanning (internal bug)")
        return u, v

    def _cycle(self, ei: int, ej: int) -> list[tuple[int, int]]:
        """Unique alternating cycle closed by the entering cell (ei, ej)."""
        parent: dict[tuple[str, int], tuple[str, int, int, int]] = {}
        start, goal = ("r", ei), ("c", ej)
        stack = [start]
        seen = {start}
        while stack:
            kind, k = stack.pop()
            if (kind, k) == goal:
                break
            if kind == "r":
                for j in self.rows_adj[k]:
                    node = ("c", j)
                    if node not in seen:
                        seen.add(node)
                        parent[node] = ("r", k, k, j)
                        stack.append(node)
            else:
                for i in self.cols_adj[k]:
                    node = ("r", i)
                    if node not in seen:
                        seen.add(node)
                        parent[node] = ("c", k, i, k)
                        stack.append(node)
        if goal not in seen:
            raise OTLabError("entering cell closes no cycle (internal bug)")
        path_cells = []
        node = goal
        while node != start:
            kind, k, ci, cj = parent[node]
            path_cells.append((ci, cj))
            node = (kind, k)
        # walk order: entering cell, then tree path from the goal column
        # back to the entering row; signs alternate starting with +
        return [(ei, ej)] + path_cells

    def pivot_until_optimal(self, max_pivots: int) -> int:
        pivots = 0
        while True:
            u, v = self.duals()
            reduced = self.cmat - u[:, None] - v[None, :]
            candidates = np.argwhere(reduced < -self.tol)
            if candidates.size == 0:
                return pivots
            if pivots >= max_pivots:
                raise ConvergenceError(
                    "transportation simplex exceeded its pivot budget",
                    residual=float(-reduced.min()),
                )
            ei, ej = map(int, candidates[0])  # argwhere is row-major sorted
            cycle = self._cycle(ei, ej)
            minus = cycle[1::2]
            theta = min(self.x[c] for c in minus)
            leaving = min(
                (c for c in minus if self.x[c] == theta),
                key=lambda c: c[0] * self.n + c[1],
            )
            for idx, c in enumerate(cycle):
                self.x[c] += theta if idx % 2 == 0 else -theta
            self.x[leaving] = 0.0
            self._remove(*leaving)
            self._add(ei, ej)
            pivots += 1


def solve_lp(rho: DensityField, g: DensityField, cost: RadialCost,
             capacity: int = _LP_CAPACITY) -> TransportResult:
    """Exact coupling by transportation-simplex pivoting on the dense cost.

    Dual variables from the final basis tree are canonicalized by a double
    c-transform before they are returned, so gradients of phi are safe to
    take. Instances beyond ``capacity`` cells squared are refused.
    """
    if rho.grid.num_cells * g.grid.num_cells > capacity:
        raise CapacityError(
            f"instance size {rho.grid.num_cells} x {g.grid.num_cells} exceeds the limit"
        )
    a, b = _marginals(rho, g)
    cmat = _cost_matrix(cost, rho.grid.cell_centers(), g.grid.cell_centers())
    simplex = _TransportationSimplex(cmat, a, b)
    pivots = simplex.pivot_until_optimal(max_pivots=50 * (len(a) + len(b)))
    u, v = simplex.duals()
    primal = float((simplex.x * cmat).sum())

    phi, psi = canonical_pair(cost, u.reshape(rho.grid.shape), rho.grid, g.grid)
    dual = float(phi.reshape(-1) @ a + psi.reshape(-1) @ b)
    result = TransportResult(
        source=rho,
        target=g,
        cost=cost,
        coupling=simplex.x,
        phi=phi,
        psi=psi,
        primal=primal,
        dual=dual,
        solver="lp",
        meta={"pivots": pivots},
    )
    result.validate()
    if result.gap > 1e-8 * (1.0 + abs(primal)):
        raise OTLabError(f"LP duality gap {result.gap:.3e} out of tolerance")
    return result


def _default_schedule(eps_final: float, cost_scale: float) -> list[float]:
    eps = max(eps_final, cost_scale / 8.0)
    schedule = []
    while eps > eps_final * (1.0 + 1e-12):
        schedule.append(eps)
        eps /= 4.0
    schedule.append(eps_final)
    return schedule


def _round_to_polytope(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project an almost-feasible plan onto exact marginals.

    Rows and columns are scaled down where they overshoot, then the missing
    mass is restored by a rank-one correction; the L1 perturbation is at most
    twice the original marginal violation.
    """
    rows = plan.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rscale = np.where(rows > a, a / rows, 1.0)
    plan = plan * rscale[:, None]
    cols = plan.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cscale = np.where(cols > b, b / cols, 1.0)
    plan = plan * cscale[None, :]
    err_a = np.maximum(a - plan.sum(axis=1), 0.0)
    err_b = np.maximum(b - plan.sum(axis=0), 0.0)
    s = err_a.sum()
    if s > 0:
        plan = plan + np.outer(err_a, err_b) / s
    return plan


def solve_entropic(rho: DensityField, g: DensityField, cost: RadialCost,
                   eps_final: float, schedule: list[float] | None = None,
                   max_iterations: int = 20000, raw_marginal_tol: float = 1e-7,
                   overrelaxation: float = 1.95,
                   warm_start: tuple[np.ndarray, np.ndarray] | None = None) -> TransportResult:
    """Entropically regularized transport by log-domain dual ascent.

    Alternates softmin c-transform updates of the scaled potentials with an
    epsilon-scaling schedule (warm starts across levels) and overrelaxed
    updates, which remove the small-epsilon stall of the plain iteration.
    Once the column marginal violation falls below ``raw_marginal_tol`` in L1
    (rows are exact after a plain f-update), the plan is rounded onto the
    transport polytope, so the returned coupling satisfies both marginals to
    float accuracy. The returned potentials are canonicalized by one exact
    double c-transform, so they satisfy the same feasibility contract as the
    exact solvers while the coupling keeps its entropic blur.
    """
    if not eps_final > 0:
        raise ParameterError("eps_final must be positive")
    if not 1.0 <= overrelaxation < 2.0:
        raise ParameterError("overrelaxation must lie in [1, 2)")
    a, b = _marginals(rho, g)
    cmat = _cost_matrix(cost, rho.grid.cell_centers(), g.grid.cell_centers())
    if schedule is None:
        schedule = _default_schedule(eps_final, float(cmat.max()))
    else:
        schedule = [float(e) for e in schedule]
        if not schedule or any(e <= 0 for e in schedule):
            raise ParameterError("schedule entries must be positive")
        if any(e2 >= e1 for e1, e2 in zip(schedule, schedule[1:])):
            raise ParameterError("schedule must decrease strictly")
        if schedule[-1] != eps_final:
            raise ParameterError("schedule must end at eps_final")

    with np.errstate(divide="ignore"):
        loga = np.log(a)
        logb = np.log(b)
    if warm_start is not None:
        f = np.asarray(warm_start[0], dtype=float).reshape(-1).copy()
        gv = np.asarray(warm_start[1], dtype=float).reshape(-1).copy()
    else:
        f = np.zeros_like(a)
        gv = np.zeros_like(b)

    check_every = 5
    iterations = 0
    residual = np.inf
    for level, eps in enumerate(schedule):
        final_level = level == len(schedule) - 1
        cap = max_iterations if final_level else 200
        omega = overrelaxation
        converged = False
        for it in range(cap):
            gnew = -eps * logsumexp((f[:, None] - cmat) / eps + loga[:, None], axis=0)
            gv = (1.0 - omega) * gv + omega * gnew
            fnew = -eps * logsumexp((gv[None, :] - cmat) / eps + logb[None, :], axis=1)
            iterations += 1
            if it % check_every == 0 or it == cap - 1:
                # with the plain update fnew the row marginal is exact
                log_plan = loga[:, None] + logb[None, :] + (fnew[:, None] + gv[None, :] - cmat) / eps
                col_err = np.abs(np.exp(logsumexp(log_plan, axis=0)) - b)
                residual = float(col_err.sum())
                if not np.isfinite(residual):
                    # overrelaxation overshot; restart this level plainly
                    omega = 1.0
                    f = np.zeros_like(a)
                    gv = np.zeros_like(b)
                    residual = np.inf
                    continue
                if residual <= raw_marginal_tol:
                    f = fnew
                    converged = True
                    break
            f = (1.0 - omega) * f + omega * fnew
        if final_level and not converged:
            raise ConvergenceError(
                f"entropic solver residual {residual:.3e} after {iterations} iterations",
                residual=residual,
            )

    log_plan = loga[:, None] + logb[None, :] + (f[:, None] + gv[None, :] - cmat) / eps
    plan = _round_to_polytope(np.exp(log_plan), a, b)
    primal = float((plan * cmat).sum())
    phi, psi = canonical_pair(cost, f.reshape(rho.grid.shape), rho.grid, g.grid)
    dual = float(phi.reshape(-1) @ a + psi.reshape(-1) @ b)
    result = TransportResult(
        source=rho,
        target=g,
        cost=cost,
        coupling=plan,
        phi=phi,
        psi=psi,
        primal=primal,
        dual=dual,
        solver="entropic",
        meta={
            "eps_final": eps_final,
            "schedule": list(schedule),
            "iterations": iterations,
            "raw_marginal_residual": residual,
            "raw_potentials": (f, gv),
        },
    )
    result.validate()
    return result


def transport_map_from_potential(phi, cost: RadialCost, rho: DensityField,
                                 mass_threshold: float | None = None) -> MapField:
    """Assemble T(x) = x - grad_h_star(grad phi(x)) on cells carrying mass.

    Finite-difference gradients of a canonical potential stay inside the
    gradient range of the cost up to discretization error; a relative
    overshoot beyond 0.1% signals a non-c-concave input and raises instead
    of being clipped silently. Map values are clipped to the box and the
    worst clip distance is recorded.
    """
    grid = rho.grid
    grad_phi = geometry.gradient(np.asarray(phi, dtype=float), grid).components.reshape(-1, grid.d)
    norms = np.sqrt((grad_phi**2).sum(axis=1))
    wmax = cost.grad_range()
    threshold = default_mass_threshold(grid) if mass_threshold is None else mass_threshold
    mask = rho.values.reshape(-1) > threshold
    if norms[mask].size and norms[mask].max() > wmax * (1.0 + 1e-3):
        raise RangeError(
            f"|grad phi| = {norms[mask].max():.6g} exceeds the gradient range "
            f"{wmax:.6g}; the potential is not c-concave on this grid"
        )
    scale = np.ones_like(norms)
    over = norms > wmax
    scale[over] = wmax / norms[over]
    displacement = grad_h_star(cost, grad_phi * scale[:, None])
    points = grid.cell_centers() - displacement
    points[~mask] = grid.cell_centers()[~mask]
    clipped = grid.clip(points)
    max_clip = float(np.abs(clipped - points)[mask].max()) if mask.any() else 0.0
    return MapField(grid, clipped, mask, max_clip)


@dataclass(frozen=True)
class MapConsistencyReport:
    """Mass-weighted residuals of the gradient identities along the map.

    residual_psi: |grad psi(T(x)) + grad h(x - T(x))| per masked cell.
    residual_phi: |grad phi(x) - grad h(x - T(x))| per masked cell.
    """

    residual_psi: np.ndarray = field(repr=False)
    residual_phi: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    median_psi: float
    median_phi: float
    q95_psi: float
    q95_phi: float


def weighted_quantile(values: np.ndarray, weights: np.ndarray, q: float) -> float:
    """Quantile of ``values`` under nonnegative ``weights`` (left-continuous)."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    cw = np.cumsum(w)
    if cw[-1] <= 0:
        return float("nan")
    return float(v[np.searchsorted(cw, q * cw[-1], side="left").clip(0, len(v) - 1)])


def map_consistency_check(phi, psi, map_field: MapField, cost: RadialCost,
                          rho: DensityField, target_grid: Grid | None = None) -> MapConsistencyReport:
    """Check -grad psi(T(x)) = grad h(x - T(x)) = grad phi(x) in the discrete setting.

    grad psi is interpolated multilinearly at the mapped points; both
    residual families are summarized by rho-weighted medians and 95th
    percentiles, which must shrink under grid refinement.
    """
    grid = rho.grid
    tgrid = target_grid or grid
    mask = map_field.mask
    xs = grid.cell_centers()[mask]
    ts = map_field.points[mask]
    diff = xs - ts
    gh = grad_h(cost, diff)

    grad_phi = geometry.gradient(np.asarray(phi, dtype=float), grid).components.reshape(-1, grid.d)[mask]
    psi_arr = np.asarray(psi, dtype=float).reshape(tgrid.shape)
    grad_psi_field = geometry.gradient(psi_arr, tgrid).components
    grad_psi_at_t = np.stack(
        [
            geometry.interp_multilinear(tgrid, grad_psi_field[..., axis], ts)
            for axis in range(tgrid.d)
        ],
        axis=-1,
    )

    res_psi = np.sqrt(((grad_psi_at_t + gh) ** 2).sum(axis=1))
    res_phi = np.sqrt(((grad_phi - gh) ** 2).sum(axis=1))
    weights = rho.values.reshape(-1)[mask] * grid.cell_volume
    return MapConsistencyReport(
        residual_psi=res_psi,
        residual_phi=res_phi,
        weights=weights,
        median_psi=weighted_quantile(res_psi, weights, 0.5),
        median_phi=weighted_quantile(res_phi, weights, 0.5),
        q95_psi=weighted_quantile(res_psi, weights, 0.95),
        q95_phi=weighted_quantile(res_phi, weights, 0.95),
    )


def _format_float(x: float) -> str:
    return repr(float(x))


def write_result_dir(path, result: TransportResult, map_field: MapField | None = None) -> None:
    """Serialize a result to a directory of CSV files plus a key-value meta file."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)

    ii, jj = np.nonzero(result.coupling)
    with open(out / "coupling.csv", "w", newline="\n") as fh:
        fh.write("i,j,mass\n")
        for i, j in zip(ii, jj):
            fh.write(f"{i},{j},{_format_float(result.coupling[i, j])}\n")

    geometry.write_field_csv(out / "phi.csv", result.source.grid, result.phi, "phi")
    geometry.write_field_csv(out / "psi.csv", result.target.grid, result.psi, "psi")

    if map_field is not None:
        grid = map_field.grid
        centers = grid.cell_centers()
        coord_names = ["x", "y"][: grid.d]
        map_names = [f"t_{c}" for c in coord_names]
        with open(out / "map.csv", "w", newline="\n") as fh:
            fh.write(",".join(coord_names + map_names + ["defined"]) + "\n")
            for k in range(grid.num_cells):
                cols = [_format_float(c) for c in centers[k]]
                cols += [_format_float(c) for c in map_field.points[k]]
                cols.append("1" if map_field.mask[k] else "0")
                fh.write(",".join(cols) + "\n")

    meta = {
        "solver": result.solver,
        "primal": _format_float(result.primal),
        "dual": _format_float(result.dual),
        "gap": _format_float(result.gap),
        "source_cells": str(result.source.grid.num_cells),
        "target_cells": str(result.target.grid.num_cells),
        "cost_family": result.cost.family,
    }
    if result.cost.exponent is not None:
        meta["cost_exponent"] = _format_float(result.cost.exponent)
    if map_field is not None:
        meta["max_clip_distance"] = _format_float(map_field.max_clip_distance)
    for key, value in sorted(result.meta.items()):
        if key == "raw_potentials":
            continue
        if isinstance(value, float):
            meta[key] = _format_float(value)
        elif isinstance(value, (list, tuple)):
            meta[key] = ";".join(_format_float(v) for v in value)
        else:
            meta[key] = str(value)
    with open(Path(path) / "meta", "w", newline="\n") as fh:
        for key in sorted(meta):
            fh.write(f"{key}={meta[key]}\n")


def read_meta(path) -> dict:
    """Parse a key-value meta file back into a dict of strings."""
    meta = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            meta[key] = value
    return meta
