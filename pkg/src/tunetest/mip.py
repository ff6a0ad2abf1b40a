"""Small dense mixed-integer linear programming engine.

Solves minimization MILPs with bounded variables: the LP relaxation runs a
two-phase primal simplex on a dense tableau (bounded-variable pivoting,
Dantzig pricing with a Bland anti-cycling fallback), and integer variables
are resolved by best-bound branch and bound with most-fractional branching.

Intended for the small alignment / configuration / hold-bound models this
package produces (tens of variables, at most a few hundred rows).  No
cutting planes, no presolve beyond bound tightening, no warm starts.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

# Centralized tolerances (overridable per solve call).
FEASIBILITY_TOL = 1e-6
INTEGRALITY_TOL = 1e-6

_PIVOT_TOL = 1e-9
_COST_TOL = 1e-9
_BLAND_TRIGGER = 24  # degenerate pivots before switching to Bland's rule
_REFACTOR_EVERY = 128  # periodic tableau recomputation for numerical hygiene


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    ITERATION_LIMIT = "iteration-limit"


class ModelError(ValueError):
    """Raised for malformed models (bad bounds, unknown variables, ...)."""


class UnboundedError(RuntimeError):
    """Raised when an LP relaxation has an unbounded objective."""


@dataclass
class _Variable:
    name: str
    lower: float
    upper: float
    integer: bool


@dataclass
class _Constraint:
    coeffs: dict[int, float]
    relation: str  # "<=", ">=" or "="
    rhs: float


_RELATIONS = ("<=", ">=", "=")


@dataclass
class MipModel:
    """A mixed-integer linear program in minimization form."""

    variables: list[_Variable] = field(default_factory=list)
    constraints: list[_Constraint] = field(default_factory=list)
    objective: dict[int, float] = field(default_factory=dict)

    def add_var(self, name: str, lower: float, upper: float,
                integer: bool = False) -> int:
        """Declare a variable and return its column index."""
        if lower > upper:
            raise ModelError(f"variable {name!r}: lower {lower} > upper {upper}")
        if integer and not (math.isfinite(lower) and math.isfinite(upper)):
            raise ModelError(f"integer variable {name!r} needs finite bounds")
        if not (math.isfinite(lower) or math.isfinite(upper)):
            raise ModelError(f"variable {name!r} needs at least one finite bound")
        self.variables.append(_Variable(name, float(lower), float(upper), integer))
        return len(self.variables) - 1

    def add_constraint(self, coeffs: dict[int, float], relation: str,
                       rhs: float) -> None:
        if relation not in _RELATIONS:
            raise ModelError(f"unknown relation {relation!r}")
        for idx in coeffs:
            if not 0 <= idx < len(self.variables):
                raise ModelError(f"constraint references unknown variable {idx}")
        self.constraints.append(_Constraint(dict(coeffs), relation, float(rhs)))

    def set_objective(self, coeffs: dict[int, float]) -> None:
        for idx in coeffs:
            if not 0 <= idx < len(self.variables):
                raise ModelError(f"objective references unknown variable {idx}")
        self.objective = dict(coeffs)

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    def integer_indices(self) -> list[int]:
        return [i for i, v in enumerate(self.variables) if v.integer]

    def to_lp_text(self) -> str:
        """Plain-text dump of the model for debugging."""
        def term(c: float, name: str) -> str:
            sign = "+" if c >= 0 else "-"
            return f"{sign} {abs(c):g} {name}"

        lines = ["Minimize"]
        obj = " ".join(term(c, self.variables[i].name)
                       for i, c in sorted(self.objective.items()))
        lines.append("  " + (obj.lstrip("+ ") or "0"))
        lines.append("Subject To")
        for k, con in enumerate(self.constraints):
            lhs = " ".join(term(c, self.variables[i].name)
                           for i, c in sorted(con.coeffs.items()))
            lines.append(f"  r{k}: {lhs.lstrip('+ ') or '0'} {con.relation} {con.rhs:g}")
        lines.append("Bounds")
        for v in self.variables:
            lines.append(f"  {v.lower:g} <= {v.name} <= {v.upper:g}")
        integers = [v.name for v in self.variables if v.integer]
        if integers:
            lines.append("Integers")
            lines.append("  " + " ".join(integers))
        return "\n".join(lines) + "\n"


@dataclass
class MipSolution:
    status: SolveStatus
    x: np.ndarray | None
    objective: float | None
    dual_objective: float | None = None
    nodes: int = 0

    def value(self, model: MipModel, name: str) -> float:
        if self.x is None:
            raise ValueError("no solution values available")
        for i, v in enumerate(model.variables):
            if v.name == name:
                return float(self.x[i])
        raise KeyError(name)

    def values(self, model: MipModel) -> dict[str, float]:
        if self.x is None:
            raise ValueError("no solution values available")
        return {v.name: float(self.x[i]) for i, v in enumerate(model.variables)}


# ---------------------------------------------------------------------------
# LP core: bounded-variable two-phase primal simplex on a dense tableau.


class _LpResult:
    __slots__ = ("status", "x", "objective", "dual_objective")

    def __init__(self, status, x=None, objective=None, dual_objective=None):
        self.status = status
        self.x = x
        self.objective = objective
        self.dual_objective = dual_objective


def _initial_values(lb: np.ndarray, ub: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nonbasic starting point: each variable at a finite bound."""
    at_upper = ~np.isfinite(lb)
    vals = np.where(at_upper, ub, lb)
    return vals, at_upper


def _simplex_phase(A, b, c, lb, ub, basis, at_upper, vals, max_iter):
    """Run primal simplex until optimal for the given cost vector.

    Mutates basis / at_upper / vals in place; the tableau is maintained as
    B^-1 A with explicit pivoting.  Returns (status, iterations_used).
    """
    m, total = A.shape
    B = A[:, basis]
    try:
        tab = np.linalg.solve(B, A)
        beta = np.linalg.solve(B, b)
    except np.linalg.LinAlgError:
        raise ModelError("singular starting basis")

    fixed = ub - lb <= 0.0  # variables pinned to a point never enter
    degenerate_streak = 0
    bland = False

    for it in range(max_iter):
        if it and it % _REFACTOR_EVERY == 0:
            B = A[:, basis]
            tab = np.linalg.solve(B, A)
            beta = np.linalg.solve(B, b)

        nb_vals = vals.copy()
        nb_vals[basis] = 0.0
        xb = beta - tab @ nb_vals

        r = c - c[basis] @ tab
        r[basis] = 0.0

        viol_low = (~at_upper) & (r < -_COST_TOL) & ~fixed
        viol_up = at_upper & (r > _COST_TOL) & ~fixed
        viol_low[basis] = False
        viol_up[basis] = False
        eligible = np.where(viol_low | viol_up)[0]
        if eligible.size == 0:
            vals[basis] = xb
            return SolveStatus.OPTIMAL, it

        if bland:
            q = int(eligible[0])
        else:
            q = int(eligible[np.argmax(np.abs(r[eligible]))])
        direction = -1.0 if at_upper[q] else 1.0  # movement of x_q

        d = tab[:, q]
        sd = direction * d
        # Basic variable i changes by -sigma*t*d_i; find blocking step.
        t_best = ub[q] - lb[q]
        block = -1  # -1: bound flip on the entering variable
        basis_lb = lb[basis]
        basis_ub = ub[basis]
        dec = sd > _PIVOT_TOL          # basic value decreases toward lower
        inc = sd < -_PIVOT_TOL         # basic value increases toward upper
        ratios = np.full(m, np.inf)
        ratios[dec] = (xb[dec] - basis_lb[dec]) / sd[dec]
        ratios[inc] = (xb[inc] - basis_ub[inc]) / sd[inc]
        ratios = np.maximum(ratios, 0.0)
        i_min = int(np.argmin(ratios))
        if ratios[i_min] < t_best:
            t_best = ratios[i_min]
            if bland:
                # smallest variable index among near-minimal blockers
                near = np.where(ratios <= t_best + 1e-12)[0]
                i_min = int(near[np.argmin(basis[near])])
            else:
                near = np.where(ratios <= t_best + 1e-12)[0]
                i_min = int(near[np.argmax(np.abs(sd[near]))])
            block = i_min

        if not np.isfinite(t_best):
            raise UnboundedError("LP relaxation is unbounded")

        if t_best <= _PIVOT_TOL:
            degenerate_streak += 1
            if degenerate_streak >= _BLAND_TRIGGER:
                bland = True
        else:
            degenerate_streak = 0
            bland = False

        if block < 0:
            # entering variable runs to its other bound; basis unchanged
            at_upper[q] = ~at_upper[q]
            vals[q] = ub[q] if at_upper[q] else lb[q]
            continue

        leaving = basis[block]
        hit_lower = sd[block] > 0
        at_upper[leaving] = not hit_lower
        vals[leaving] = basis_lb[block] if hit_lower else basis_ub[block]
        vals[q] = (vals[q] + direction * t_best)  # informative only; recomputed as basic
        basis[block] = q

        piv = tab[block, q]
        tab[block] /= piv
        beta[block] /= piv
        col = tab[:, q].copy()
        col[block] = 0.0
        tab -= np.outer(col, tab[block])
        beta -= col * beta[block]

    return SolveStatus.ITERATION_LIMIT, max_iter


def _solve_lp(A, b, c, lb, ub, max_iter, feas_tol) -> _LpResult:
    """Two-phase bounded simplex for  min c@x  s.t.  A x = b, lb <= x <= ub."""
    m, n = A.shape
    vals0, at_upper0 = _initial_values(lb, ub)
    resid = b - A @ vals0
    sign = np.where(resid >= 0, 1.0, -1.0)

    A1 = np.hstack([A, np.diag(sign)])
    lb1 = np.concatenate([lb, np.zeros(m)])
    ub1 = np.concatenate([ub, np.full(m, np.inf)])
    vals = np.concatenate([vals0, np.abs(resid)])
    at_upper = np.concatenate([at_upper0, np.zeros(m, dtype=bool)])
    basis = np.arange(n, n + m)

    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    status, used = _simplex_phase(A1, b, c1, lb1, ub1, basis, at_upper, vals,
                                  max_iter)
    if status is not SolveStatus.OPTIMAL:
        return _LpResult(status)
    art_total = float(np.sum(vals[n:]))
    if art_total > feas_tol:
        return _LpResult(SolveStatus.INFEASIBLE)

    # Pin artificials at zero and optimize the real objective.
    ub1[n:] = 0.0
    vals[n:] = np.minimum(vals[n:], 0.0)
    c2 = np.concatenate([c, np.zeros(m)])
    status, _ = _simplex_phase(A1, b, c2, lb1, ub1, basis, at_upper, vals,
                               max_iter - used)
    if status is not SolveStatus.OPTIMAL:
        return _LpResult(status)

    x = vals[:n].copy()
    obj = float(c @ x)

    # Duals from the final basis; strong-duality value includes the
    # reduced-cost contribution of nonbasic variables at finite bounds.
    B = A1[:, basis]
    pi = np.linalg.solve(B.T, c2[basis])
    r = c2 - pi @ A1
    r[basis] = 0.0
    bound_vals = vals.copy()
    bound_vals[basis] = 0.0
    finite = np.isfinite(bound_vals)
    dual = float(pi @ b + r[finite] @ bound_vals[finite])
    return _LpResult(SolveStatus.OPTIMAL, x, obj, dual)


def _standard_form(model: MipModel):
    """Append one slack column per row; slack bounds encode the relation."""
    n = model.n_vars
    m = len(model.constraints)
    A = np.zeros((m, n + m))
    b = np.zeros(m)
    slack_lb = np.zeros(m)
    slack_ub = np.zeros(m)
    for k, con in enumerate(model.constraints):
        for idx, cf in con.coeffs.items():
            A[k, idx] = cf
        A[k, n + k] = 1.0
        b[k] = con.rhs
        if con.relation == "<=":
            slack_lb[k], slack_ub[k] = 0.0, np.inf
        elif con.relation == ">=":
            slack_lb[k], slack_ub[k] = -np.inf, 0.0
        else:
            slack_lb[k], slack_ub[k] = 0.0, 0.0
    c = np.zeros(n + m)
    for idx, cf in model.objective.items():
        c[idx] = cf
    lb = np.array([v.lower for v in model.variables] + list(slack_lb))
    ub = np.array([v.upper for v in model.variables] + list(slack_ub))
    return A, b, c, lb, ub


def solve(model: MipModel, *, node_limit: int = 200_000,
          lp_iteration_limit: int = 20_000,
          feas_tol: float = FEASIBILITY_TOL,
          int_tol: float = INTEGRALITY_TOL) -> MipSolution:
    """Solve the model to proven optimality (within tolerances).

    Feasible models within the limits return an optimal solution;
    infeasibility is certified by the root LP or an exhausted tree.  Hitting
    the node cap returns ``iteration-limit`` with the incumbent, if any.
    """
    if not model.variables:
        raise ModelError("model has no variables")
    A, b, c, lb_full, ub_full = _standard_form(model)
    n = model.n_vars
    int_idx = model.integer_indices()

    def lp_with(lo: np.ndarray, hi: np.ndarray) -> _LpResult:
        l2 = lb_full.copy()
        u2 = ub_full.copy()
        l2[:n] = lo
        u2[:n] = hi
        return _solve_lp(A, b, c, l2, u2, lp_iteration_limit, feas_tol)

    lb0 = lb_full[:n].copy()
    ub0 = ub_full[:n].copy()
    root = lp_with(lb0, ub0)
    nodes = 1
    if root.status is SolveStatus.INFEASIBLE:
        return MipSolution(SolveStatus.INFEASIBLE, None, None, nodes=nodes)
    if root.status is not SolveStatus.OPTIMAL:
        return MipSolution(root.status, None, None, nodes=nodes)

    def fractional(x: np.ndarray) -> list[tuple[float, int]]:
        out = []
        for i in int_idx:
            f = x[i] - math.floor(x[i])
            dist = min(f, 1.0 - f)
            if dist > int_tol:
                out.append((dist, i))
        return out

    if not int_idx or not fractional(root.x):
        x = root.x[:n].copy()
        _snap_integers(x, int_idx, int_tol)
        return MipSolution(SolveStatus.OPTIMAL, x, root.objective,
                           root.dual_objective, nodes=nodes)

    incumbent_x = None
    incumbent_obj = math.inf

    # Rounding heuristic: fix integers to the nearest in-bounds grid point
    # and re-solve for the continuous rest.  Gives branch and bound an early
    # incumbent for pruning.
    lo_r = lb0.copy()
    hi_r = ub0.copy()
    for i in int_idx:
        v = min(max(round(root.x[i]), lb0[i]), ub0[i])
        lo_r[i] = hi_r[i] = v
    heur = lp_with(lo_r, hi_r)
    nodes += 1
    if heur.status is SolveStatus.OPTIMAL:
        incumbent_x = heur.x[:n].copy()
        incumbent_obj = heur.objective

    counter = 0
    heap: list[tuple[float, int, np.ndarray, np.ndarray]] = []
    heapq.heappush(heap, (root.objective, counter, lb0, ub0))

    def gap_tol() -> float:
        return 1e-9 * max(1.0, abs(incumbent_obj))

    limited = False
    while heap:
        bound, _, lo, hi = heapq.heappop(heap)
        if incumbent_x is not None and bound >= incumbent_obj - gap_tol():
            continue  # fathomed by bound (best-bound order: all others too)
        if nodes >= node_limit:
            limited = True
            break
        res = lp_with(lo, hi)
        nodes += 1
        if res.status is SolveStatus.INFEASIBLE:
            continue
        if res.status is not SolveStatus.OPTIMAL:
            limited = True
            break
        if incumbent_x is not None and res.objective >= incumbent_obj - gap_tol():
            continue
        frac = fractional(res.x)
        if not frac:
            incumbent_x = res.x[:n].copy()
            incumbent_obj = res.objective
            continue
        # Most-fractional branching, ties broken by variable index.
        frac.sort(key=lambda t: (-t[0], t[1]))
        _, j = frac[0]
        down_hi = hi.copy()
        down_hi[j] = math.floor(res.x[j])
        up_lo = lo.copy()
        up_lo[j] = math.ceil(res.x[j])
        counter += 1
        heapq.heappush(heap, (res.objective, counter, lo.copy(), down_hi))
        counter += 1
        heapq.heappush(heap, (res.objective, counter, up_lo, hi.copy()))

    if incumbent_x is None:
        status = SolveStatus.ITERATION_LIMIT if limited else SolveStatus.INFEASIBLE
        return MipSolution(status, None, None, nodes=nodes)
    _snap_integers(incumbent_x, int_idx, int_tol)
    status = SolveStatus.ITERATION_LIMIT if limited else SolveStatus.OPTIMAL
    return MipSolution(status, incumbent_x, incumbent_obj, nodes=nodes)


def _snap_integers(x: np.ndarray, int_idx: list[int], int_tol: float) -> None:
    for i in int_idx:
        r = round(x[i])
        if abs(x[i] - r) <= 10 * int_tol:
            x[i] = float(r)
