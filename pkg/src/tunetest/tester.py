"""Virtual tester: aligned frequency stepping over test batches.

Each test iteration picks one clock period for the whole batch.  Buffers at
the batch's flip-flops are adjusted so that as many shifted delay ranges as
possible sit centered on that period; a pass tightens an edge's upper
bound, a fail raises its lower bound, and edges leave the batch once their
range is narrower than the tester resolution.

The period/buffer choice minimizes the weighted distance between the period
and every shifted range center, with weights favoring the middle of the
sorted centers so non-overlapping ranges (which no buffer setting can merge)
are swept in a deterministic order.  Structurally this is a small MILP; two
exact shortcuts cover the common shapes: a pure weighted median when no
buffer is adjustable, and vectorized grid enumeration when the adjustable
buffers span few combinations.  All three routes return a minimizer of the
same objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import mip
from .timing import SETUP, ChipInstance, DelayModel, TimingGraph

CENTER_WEIGHT = 1000.0  # weight of the middle sorted range center
WEIGHT_STEP = 1.0       # per-position decrease moving outward
COMPONENT_GRID_CAP = 1000  # coupled-buffer grid size the direct solver accepts

_WIDTH_SLOP = 1e-9  # relative slop when comparing range width to resolution


class AlignmentInfeasibleError(RuntimeError):
    """Hold floors contradict the available buffer ranges."""

    def __init__(self, message: str, violations: list[str] | None = None):
        super().__init__(message)
        self.violations = violations or []


class TesterLogicError(RuntimeError):
    """Iteration guard tripped: indicates a bug, not a chip property."""


@dataclass
class TesterConfig:
    resolution: float
    max_iterations: int = 10_000

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")


@dataclass
class DelayBound:
    edge_id: str
    lower: float
    upper: float

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @property
    def center(self) -> float:
        return 0.5 * (self.lower + self.upper)


@dataclass
class IterationRecord:
    chip_id: int
    batch_index: int
    iteration: int
    period: float
    steps: dict[str, int]
    passed: dict[str, bool]
    bounds: dict[str, tuple[float, float]]
    clamped: list[str] = field(default_factory=list)
    boundary: list[str] = field(default_factory=list)  # removed with one side never tightened


class AlignmentCache:
    """Memoizes alignment solves keyed on the exact batch state.

    Bound trajectories are deterministic functions of pass/fail history, so
    chips sharing a history prefix share solves; on correlated benchmarks
    the hit rate is high and this removes most MILP work.
    """

    def __init__(self):
        self._store: dict = {}
        self.hits = 0
        self.misses = 0

    def get(self, key):
        res = self._store.get(key)
        if res is not None:
            self.hits += 1
        return res

    def put(self, key, result) -> None:
        self.misses += 1
        self._store[key] = result


@dataclass
class AlignmentResult:
    period: float
    steps: dict[str, int]     # adjustable node -> grid index
    values: dict[str, float]  # adjustable node -> buffer value
    objective: float
    method: str               # "median" | "enumeration" | "mip"


@dataclass
class AlignmentProblem:
    """One batch alignment instance, ready for any of the solve routes."""

    edge_ids: list[str]
    centers: np.ndarray        # unshifted range centers (u+l)/2
    weights: np.ndarray
    fixed_shift: np.ndarray    # shift contribution of non-adjustable buffers
    adj_nodes: list[str]
    coef: np.ndarray           # edges x adj_nodes, +1 source / -1 sink
    grid_start: np.ndarray
    grid_step: np.ndarray
    grid_count: np.ndarray
    hold_floor: np.ndarray     # per edge, -inf when absent
    big_m: float


def _sorted_center_weights(order_keys: list[tuple[float, str]],
                           center_weight: float,
                           weight_step: float) -> np.ndarray:
    """Middle of the sorted centers gets the top weight, decreasing outward."""
    n = len(order_keys)
    order = sorted(range(n), key=lambda i: order_keys[i])
    mid = (n - 1) // 2
    weights = np.empty(n)
    for pos, idx in enumerate(order):
        weights[idx] = center_weight - weight_step * abs(pos - mid)
    if np.any(weights <= 0):
        raise ValueError("weight schedule went non-positive; lower weight_step")
    return weights


def build_alignment(batch_edges: Sequence[str],
                    bounds: Mapping[str, tuple[float, float]],
                    graph: TimingGraph,
                    hold_floors: Mapping[str, float],
                    align: bool = True,
                    center_weight: float = CENTER_WEIGHT,
                    weight_step: float = WEIGHT_STEP) -> AlignmentProblem:
    edge_ids = sorted(batch_edges)
    n = len(edge_ids)
    centers = np.empty(n)
    fixed_shift = np.zeros(n)
    hold_floor = np.full(n, -np.inf)

    adj_set: list[str] = []
    if align:
        seen = set()
        for eid in edge_ids:
            e = graph.edges[eid]
            for node in (e.src, e.dst):
                if node not in seen and graph.flip_flops[node].buffer:
                    seen.add(node)
                    adj_set.append(node)
        adj_set.sort()
    adj_index = {node: i for i, node in enumerate(adj_set)}

    coef = np.zeros((n, len(adj_set)))
    for i, eid in enumerate(edge_ids):
        lo, hi = bounds[eid]
        centers[i] = 0.5 * (lo + hi)
        e = graph.edges[eid]
        for node, sign in ((e.src, 1.0), (e.dst, -1.0)):
            if node in adj_index:
                coef[i, adj_index[node]] += sign
            else:
                fixed_shift[i] += sign * graph.buffer_value(node)
        if eid in hold_floors:
            hold_floor[i] = hold_floors[eid]

    grid_start = np.array([graph.flip_flops[v].buffer.range_start
                           for v in adj_set])
    grid_step = np.array([graph.flip_flops[v].buffer.grid_step
                          for v in adj_set])
    grid_count = np.array([graph.flip_flops[v].buffer.step_count
                           for v in adj_set], dtype=int)

    current_shift = fixed_shift.copy()
    for j, node in enumerate(adj_set):
        current_shift += coef[:, j] * graph.buffer_value(node)
    keys = [(float(c + s), eid)
            for c, s, eid in zip(centers, current_shift, edge_ids)]
    weights = _sorted_center_weights(keys, center_weight, weight_step)

    spans = np.array([bounds[eid][1] - bounds[eid][0] for eid in edge_ids])
    max_shift = float(np.sum(np.abs(coef) * (np.abs(grid_start) +
                                             grid_step * (grid_count - 1)),
                             axis=1).max(initial=0.0))
    big_m = 4.0 * (float(np.abs(centers).max(initial=1.0)) +
                   float(spans.max(initial=0.0)) + max_shift + 1.0)
    return AlignmentProblem(edge_ids, centers, weights, fixed_shift,
                            adj_set, coef, grid_start, grid_step,
                            grid_count, hold_floor, big_m)


def _weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    cum = np.cumsum(w)
    pos = int(np.searchsorted(cum, 0.5 * cum[-1]))
    return float(v[pos])


def _solve_fixed(problem: AlignmentProblem) -> AlignmentResult:
    shifted = problem.centers + problem.fixed_shift
    bad = problem.fixed_shift < problem.hold_floor - 1e-12
    if np.any(bad):
        names = [problem.edge_ids[i] for i in np.where(bad)[0]]
        raise AlignmentInfeasibleError(
            f"hold floors unreachable with fixed buffers on {names}", names)
    period = _weighted_median(shifted, problem.weights)
    obj = float(np.sum(problem.weights * np.abs(period - shifted)))
    return AlignmentResult(period, {}, {}, obj, "median")


def _coupling_components(problem: AlignmentProblem) -> list[list[int]]:
    """Group adjustable buffers that share an edge; they must be co-chosen."""
    n_adj = len(problem.adj_nodes)
    parent = list(range(n_adj))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(len(problem.edge_ids)):
        cols = np.nonzero(problem.coef[i])[0]
        for a, b in zip(cols[:-1], cols[1:]):
            ra, rb = find(int(a)), find(int(b))
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for j in range(n_adj):
        groups.setdefault(find(j), []).append(j)
    return [sorted(g) for _, g in sorted(groups.items())]


def _component_grids(problem: AlignmentProblem, comp: list[int]) -> np.ndarray:
    grids = [problem.grid_start[j] + problem.grid_step[j] *
             np.arange(problem.grid_count[j]) for j in comp]
    mesh = np.meshgrid(*grids, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)  # lexicographic K x B


def _solve_decomposed(problem: AlignmentProblem) -> AlignmentResult:
    """Exact alignment via candidate periods plus per-component grids.

    At any optimum the period is a weighted median of the shifted range
    centers, hence equal to one of them; every value a shifted center can
    take is enumerable from that edge's own buffer grids.  For a fixed
    period the objective separates over buffer coupling components, each of
    which is minimized independently over its (hold-feasible) grid.
    """
    n = len(problem.edge_ids)
    base = problem.centers + problem.fixed_shift
    comps = _coupling_components(problem)
    edge_cols = [np.nonzero(problem.coef[i])[0] for i in range(n)]
    comp_of_col = {}
    for ci, comp in enumerate(comps):
        for j in comp:
            comp_of_col[j] = ci

    fixed_edges = [i for i in range(n) if edge_cols[i].size == 0]
    comp_edges: list[list[int]] = [[] for _ in comps]
    for i in range(n):
        if edge_cols[i].size:
            comp_edges[comp_of_col[int(edge_cols[i][0])]].append(i)

    bad = [problem.edge_ids[i] for i in fixed_edges
           if problem.fixed_shift[i] < problem.hold_floor[i] - 1e-12]
    if bad:
        raise AlignmentInfeasibleError(
            f"hold floors unreachable with fixed buffers on {bad}", bad)

    # Candidate periods: every shifted center value any edge can produce.
    cands = [base[fixed_edges]] if fixed_edges else []
    for i in range(n):
        cols = edge_cols[i]
        if cols.size == 0:
            continue
        vals = np.array([base[i]])
        for j in cols:
            grid = (problem.grid_start[j] + problem.grid_step[j] *
                    np.arange(problem.grid_count[j]))
            vals = (vals[:, None] + problem.coef[i, j] * grid[None, :]).ravel()
        cands.append(vals)
    periods = np.unique(np.concatenate(cands))
    n_t = periods.shape[0]

    total = np.zeros(n_t)
    for i in fixed_edges:
        total += problem.weights[i] * np.abs(periods - base[i])

    best_cols: list[np.ndarray] = []
    combo_tables: list[np.ndarray] = []
    for ci, comp in enumerate(comps):
        combos = _component_grids(problem, comp)
        combo_tables.append(combos)
        cost = np.zeros((n_t, combos.shape[0]))
        feas = np.ones(combos.shape[0], dtype=bool)
        for i in comp_edges[ci]:
            shift_part = combos @ problem.coef[i, comp]
            centers_i = base[i] + shift_part
            cost += problem.weights[i] * np.abs(periods[:, None]
                                                - centers_i[None, :])
            if np.isfinite(problem.hold_floor[i]):
                feas &= (problem.fixed_shift[i] + shift_part
                         >= problem.hold_floor[i] - 1e-12)
        if not feas.any():
            names = [problem.edge_ids[i] for i in comp_edges[ci]
                     if np.isfinite(problem.hold_floor[i])]
            raise AlignmentInfeasibleError(
                f"no buffer combination satisfies the hold floors on {names}",
                names)
        cost[:, ~feas] = np.inf
        total += cost.min(axis=1)
        best_cols.append(np.argmin(cost, axis=1))

    best_t = int(np.argmin(total))
    steps: dict[str, int] = {}
    values: dict[str, float] = {}
    for ci, comp in enumerate(comps):
        combo = combo_tables[ci][best_cols[ci][best_t]]
        for pos, j in enumerate(comp):
            node = problem.adj_nodes[j]
            k = int(round((combo[pos] - problem.grid_start[j])
                          / problem.grid_step[j])) if problem.grid_step[j] else 0
            steps[node] = k
            values[node] = float(problem.grid_start[j]
                                 + k * problem.grid_step[j])
    return AlignmentResult(float(periods[best_t]), steps, values,
                           float(total[best_t]), "decomposed")


def _solve_mip(problem: AlignmentProblem, indicator: bool) -> AlignmentResult:
    n = len(problem.edge_ids)
    base = problem.centers + problem.fixed_shift + problem.coef @ problem.grid_start
    step_scale = problem.coef * problem.grid_step[None, :]

    reach = np.sum(np.abs(step_scale) * (problem.grid_count - 1)[None, :], axis=1)
    t_lo = float((base - reach).min()) - 1.0
    t_hi = float((base + reach).max()) + 1.0

    model = mip.MipModel()
    t_var = model.add_var("period", t_lo, t_hi)
    dev = [model.add_var(f"dev_{eid}", 0.0, np.inf)
           for eid in problem.edge_ids]
    steps = [model.add_var(f"step_{node}", 0, int(problem.grid_count[j]) - 1,
                           integer=True)
             for j, node in enumerate(problem.adj_nodes)]

    hold_rows: list[str] = []
    for i, eid in enumerate(problem.edge_ids):
        coeffs_step = {steps[j]: float(step_scale[i, j])
                       for j in range(len(steps)) if step_scale[i, j] != 0.0}
        # dev >= +/- (period - shifted center); exact for positive weights
        row = {t_var: 1.0, dev[i]: -1.0}
        for k, v in coeffs_step.items():
            row[k] = row.get(k, 0.0) - v
        model.add_constraint(row, "<=", float(base[i]))
        row = {t_var: -1.0, dev[i]: -1.0}
        for k, v in coeffs_step.items():
            row[k] = row.get(k, 0.0) + v
        model.add_constraint(row, "<=", float(-base[i]))
        if np.isfinite(problem.hold_floor[i]):
            if coeffs_step:
                rhs = float(problem.hold_floor[i] - problem.fixed_shift[i]
                            - problem.coef[i] @ problem.grid_start)
                model.add_constraint(dict(coeffs_step), ">=", rhs)
                hold_rows.append(eid)
            elif problem.fixed_shift[i] < problem.hold_floor[i] - 1e-12:
                raise AlignmentInfeasibleError(
                    f"hold floor unreachable on {eid}", [eid])
        if indicator:
            big = problem.big_m
            zp = model.add_var(f"zp_{eid}", 0, 1, integer=True)
            zn = model.add_var(f"zn_{eid}", 0, 1, integer=True)
            gpos = {t_var: 1.0}
            for k, v in coeffs_step.items():
                gpos[k] = gpos.get(k, 0.0) - v
            gneg = {k: -v for k, v in gpos.items()}
            model.add_constraint({**gpos, zp: -big}, "<=", float(base[i]))
            model.add_constraint({**gpos, dev[i]: -1.0, zp: big}, "<=",
                                 float(base[i]) + big)
            model.add_constraint({**gneg, dev[i]: 1.0, zp: big}, "<=",
                                 float(-base[i]) + big)
            model.add_constraint({**gneg, zn: -big}, "<=", float(-base[i]))
            model.add_constraint({**gneg, dev[i]: -1.0, zn: big}, "<=",
                                 float(-base[i]) + big)
            model.add_constraint({**gpos, dev[i]: 1.0, zn: big}, "<=",
                                 float(base[i]) + big)

    model.set_objective({dev[i]: float(problem.weights[i]) for i in range(n)})
    sol = mip.solve(model)
    if sol.status is mip.SolveStatus.INFEASIBLE:
        raise AlignmentInfeasibleError(
            f"alignment model infeasible; hold-constrained edges: {hold_rows}",
            hold_rows)
    if sol.status is not mip.SolveStatus.OPTIMAL:
        raise TesterLogicError(f"alignment solve ended with {sol.status}")

    step_vals = {node: int(round(sol.x[steps[j]]))
                 for j, node in enumerate(problem.adj_nodes)}
    values = {node: float(problem.grid_start[j] + problem.grid_step[j] *
                          step_vals[node])
              for j, node in enumerate(problem.adj_nodes)}
    period = float(sol.x[t_var])
    shifted = base + step_scale @ np.array([step_vals[v]
                                            for v in problem.adj_nodes]) \
        if problem.adj_nodes else base
    obj = float(np.sum(problem.weights * np.abs(period - shifted)))
    return AlignmentResult(period, step_vals, values, obj, "mip")


def compute_frequency(batch_edges: Sequence[str],
                      bounds: Mapping[str, tuple[float, float]],
                      graph: TimingGraph,
                      hold_floors: Mapping[str, float],
                      *,
                      align: bool = True,
                      center_weight: float = CENTER_WEIGHT,
                      weight_step: float = WEIGHT_STEP,
                      grid_cap: int = COMPONENT_GRID_CAP,
                      encoding: str = "auto",
                      cache: AlignmentCache | None = None) -> AlignmentResult:
    """Choose the next test clock period and buffer settings for a batch.

    Minimizes the weighted distance between the period and every shifted
    range center over the discrete buffer grids, subject to the hold floors
    of the batch edges.  ``encoding="indicator"`` forces the big-M indicator
    MILP; the default route picks the cheapest exact method: a weighted
    median when nothing is adjustable, the candidate-period decomposition
    while coupled buffer grids stay at or below ``grid_cap`` combinations,
    and the generic MILP otherwise.
    """
    problem = build_alignment(batch_edges, bounds, graph, hold_floors,
                              align=align, center_weight=center_weight,
                              weight_step=weight_step)
    if encoding == "indicator":
        return _solve_mip(problem, indicator=True)

    key = None
    if cache is not None:
        key = (tuple(problem.edge_ids),
               tuple(float(problem.centers[i]) for i in range(len(problem.edge_ids))),
               tuple(bounds[e][1] - bounds[e][0] for e in problem.edge_ids),
               tuple(sorted((v, graph.flip_flops[v].buffer.step)
                            for v in problem.adj_nodes)),
               align)
        hit = cache.get(key)
        if hit is not None:
            return hit

    if not problem.adj_nodes:
        result = _solve_fixed(problem)
    else:
        comps = _coupling_components(problem)
        biggest = max(int(np.prod(problem.grid_count[comp]))
                      for comp in comps)
        if biggest <= grid_cap:
            result = _solve_decomposed(problem)
        else:
            result = _solve_mip(problem, indicator=False)

    if cache is not None:
        cache.put(key, result)
    return result


def apply_frequency_step(batch_edges: Sequence[str], chip: ChipInstance,
                         model: DelayModel, graph: TimingGraph,
                         period: float) -> dict[str, bool]:
    """Pass/fail per edge at the given period with the current buffers.

    An edge passes when its true delay plus the source-minus-sink buffer
    skew fits in the period; batch invariants make the sink flip-flop's
    verdict attributable to exactly this edge.
    """
    out = {}
    for eid in sorted(batch_edges):
        e = graph.edges[eid]
        shift = graph.buffer_value(e.src) - graph.buffer_value(e.dst)
        true_delay = chip.true_delays[model.index_of(eid, SETUP)]
        out[eid] = bool(true_delay + shift <= period)
    return out


def make_initial_bounds(model: DelayModel,
                        edge_ids: Iterable[str]) -> dict[str, tuple[float, float]]:
    """Starting ranges: mean plus/minus three standard deviations."""
    out = {}
    for eid in sorted(edge_ids):
        idx = model.index_of(eid, SETUP)
        mu = float(model.means[idx])
        sig = model.sigma(idx)
        out[eid] = (mu - 3.0 * sig, mu + 3.0 * sig)
    return out


def bisection_iterations(width: float, resolution: float) -> int:
    """Closed-form pure-bisection count: halvings until width < resolution."""
    if width <= resolution * (1.0 + _WIDTH_SLOP):
        return 0
    return max(0, math.ceil(math.log2(width / resolution) - 1e-12))


def run_batch_test(batch_edges: Sequence[str], chip: ChipInstance,
                   model: DelayModel, graph: TimingGraph, cfg: TesterConfig,
                   hold_floors: Mapping[str, float], *,
                   align: bool = True,
                   cache: AlignmentCache | None = None,
                   log: list[IterationRecord] | None = None,
                   batch_index: int = 0,
                   ) -> tuple[dict[str, DelayBound], int]:
    """Frequency-step one batch until every edge's range beats the resolution.

    Pass updates the upper bound to period minus skew, fail updates the
    lower bound; updates only ever tighten.  A chip whose true delay lies
    outside the initial range collapses onto the nearest range edge (noted
    in the log) rather than breaking the lower <= upper invariant.
    """
    eps = cfg.resolution
    start = make_initial_bounds(model, batch_edges)
    bounds = {eid: list(b) for eid, b in start.items()}
    active = [eid for eid in sorted(bounds)
              if bounds[eid][1] - bounds[eid][0] > eps * (1.0 + _WIDTH_SLOP)]
    iterations = 0
    while active:
        iterations += 1
        if iterations > cfg.max_iterations:
            raise TesterLogicError(
                f"batch {batch_index} exceeded {cfg.max_iterations} iterations")
        result = compute_frequency(active,
                                   {e: tuple(bounds[e]) for e in active},
                                   graph, hold_floors, align=align,
                                   cache=cache)
        for node, step in result.steps.items():
            graph.flip_flops[node].buffer.set_step(step)
        verdicts = apply_frequency_step(active, chip, model, graph,
                                        result.period)
        clamped = []
        for eid in active:
            e = graph.edges[eid]
            shift = graph.buffer_value(e.src) - graph.buffer_value(e.dst)
            cut = result.period - shift
            lo, hi = bounds[eid]
            if verdicts[eid]:
                hi = min(hi, cut)
                if hi < lo:
                    hi = lo
                    clamped.append(eid)
            else:
                lo = max(lo, cut)
                if lo > hi:
                    lo = hi
                    clamped.append(eid)
            bounds[eid] = [lo, hi]
        still = [eid for eid in active
                 if bounds[eid][1] - bounds[eid][0] > eps * (1.0 + _WIDTH_SLOP)]
        if log is not None:
            removed = [eid for eid in active if eid not in still]
            boundary = [eid for eid in removed
                        if bounds[eid][0] == start[eid][0]
                        or bounds[eid][1] == start[eid][1]]
            log.append(IterationRecord(
                chip_id=chip.chip_id, batch_index=batch_index,
                iteration=iterations, period=result.period,
                steps=dict(result.steps), passed=dict(verdicts),
                bounds={e: (bounds[e][0], bounds[e][1]) for e in active},
                clamped=clamped, boundary=boundary))
        active = still
    final = {eid: DelayBound(eid, lo, hi) for eid, (lo, hi) in bounds.items()}
    return final, iterations


def run_chip_test(batches: Sequence[Sequence[str]], chip: ChipInstance,
                  model: DelayModel, graph: TimingGraph, cfg: TesterConfig,
                  hold_floors: Mapping[str, float], *,
                  align: bool = True,
                  cache: AlignmentCache | None = None,
                  log: list[IterationRecord] | None = None,
                  ) -> tuple[dict[str, DelayBound], int]:
    """Test every batch in order; buffers reset to their pre-test state
    between batches so batches stay independent and replayable."""
    home_steps = {node: graph.flip_flops[node].buffer.step
                  for node in graph.buffered_nodes()}
    all_bounds: dict[str, DelayBound] = {}
    total = 0
    for index, batch in enumerate(batches):
        for node, step in home_steps.items():
            graph.flip_flops[node].buffer.set_step(step)
        if not batch:
            continue
        bounds, iters = run_batch_test(batch, chip, model, graph, cfg,
                                       hold_floors, align=align, cache=cache,
                                       log=log, batch_index=index)
        all_bounds.update(bounds)
        total += iters
    for node, step in home_steps.items():
        graph.flip_flops[node].buffer.set_step(step)
    return all_bounds, total
