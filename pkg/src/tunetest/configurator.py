"""Post-test buffer configuration, hold-time floors, yield evaluation.

After testing, every required path delay sits in an interval: measured
paths carry their final tester bounds, predicted paths carry mean plus or
minus three posterior sigmas.  Configuration picks grid buffer values so
the designated period covers an assumed delay per path, keeping those
assumed delays as close to the interval tops as possible (minimize the
largest gap) so chips are not thrown away on pessimism alone.

Hold safety is enforced through per-edge skew floors synthesized from
samples of the hold margins: keep a target fraction of samples fully
covered while minimizing the floor sum, exactly (MILP) for small sample
counts and greedily above that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import mip
from .timing import HOLD, SETUP, ChipInstance, DelayModel, TimingGraph, repair_psd

EXACT_HOLD_CAP = 300  # sample counts up to this use the exact MILP


class ConfigurationError(RuntimeError):
    pass


@dataclass
class HoldModel:
    """Skew floors plus the sample evidence that produced them."""

    sample_count: int
    target: float
    samples: np.ndarray          # sample_count x n_edges hold margins
    kept: np.ndarray             # bool per sample; kept fraction >= target
    floors: dict[str, float]     # edge -> lower bound for src-minus-sink skew
    exact: bool = False

    def kept_fraction(self) -> float:
        return float(self.kept.sum()) / self.sample_count


@dataclass
class ConfigProblem:
    designated_period: float
    bounds: dict[str, tuple[float, float]]  # edge -> (lower, upper)
    graph: TimingGraph
    hold_floors: Mapping[str, float]

    def validate(self) -> None:
        missing = [e for e in self.graph.edges if e not in self.bounds]
        if missing:
            raise ConfigurationError(f"edges without bounds: {missing[:5]}...")
        for e, (lo, hi) in self.bounds.items():
            if lo > hi + 1e-12:
                raise ConfigurationError(f"edge {e}: lower {lo} > upper {hi}")


@dataclass
class ConfigResult:
    feasible: bool
    steps: dict[str, int] = field(default_factory=dict)
    values: dict[str, float] = field(default_factory=dict)
    assumed_delays: dict[str, float] = field(default_factory=dict)
    slack_gap: float = 0.0  # largest upper-bound minus assumed-delay gap
    tight: list[str] = field(default_factory=list)  # blocking edge groups


@dataclass
class ChipVerdict:
    chip_id: int
    feasible: bool
    setup_pass: bool
    hold_pass: bool
    slack_gap: float | None  # None when no feasible configuration exists
    ideal_pass: bool
    no_buffer_pass: bool

    @property
    def passes(self) -> bool:
        return self.feasible and self.setup_pass and self.hold_pass


@dataclass
class YieldReport:
    period: float
    yield_ideal: float
    yield_tested: float
    yield_no_buffer: float
    verdicts: list[ChipVerdict]

    @property
    def yield_drop(self) -> float:
        return self.yield_ideal - self.yield_tested


# ---------------------------------------------------------------------------
# Hold-time floors


def _sample_hold_margins(graph: TimingGraph, model: DelayModel,
                         sample_count: int, seed: int) -> tuple[list[str], np.ndarray]:
    edge_ids = graph.edge_ids()
    idx = np.array([model.index_of(e, HOLD) for e in edge_ids], dtype=int)
    cov = model.covariance[np.ix_(idx, idx)]
    mean = model.means[idx]
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(repair_psd(cov))
        factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
    rng = np.random.default_rng([seed, 0x401D])
    draws = mean[None, :] + rng.standard_normal((sample_count, len(edge_ids))) @ factor.T
    return edge_ids, draws


def _exact_hold_floors(samples: np.ndarray, keep_count: int) -> np.ndarray:
    """MILP: pick kept samples minimizing the summed per-edge maxima."""
    m, n_e = samples.shape
    lo = samples.min(axis=0)
    hi = samples.max(axis=0)
    big = hi - lo + 1e-6

    model = mip.MipModel()
    lam = [model.add_var(f"floor_{j}", float(lo[j]), float(hi[j]))
           for j in range(n_e)]
    y = [model.add_var(f"keep_{k}", 0, 1, integer=True) for k in range(m)]
    for k in range(m):
        for j in range(n_e):
            # floor_j >= sample - big*(1 - y_k): binding only for kept samples
            model.add_constraint({lam[j]: 1.0, y[k]: -float(big[j])}, ">=",
                                 float(samples[k, j] - big[j]))
    model.add_constraint({v: 1.0 for v in y}, ">=", float(keep_count))
    model.set_objective({v: 1.0 for v in lam})
    sol = mip.solve(model)
    if sol.status is not mip.SolveStatus.OPTIMAL:
        raise ConfigurationError(f"exact hold solve ended with {sol.status}")
    kept = np.array([sol.x[v] > 0.5 for v in y])
    return kept


def _greedy_hold_floors(samples: np.ndarray, keep_count: int) -> np.ndarray:
    """Drop the sample whose removal shrinks the floor sum the most."""
    m, _ = samples.shape
    kept = np.ones(m, dtype=bool)
    for _ in range(m - keep_count):
        vals = samples[kept]
        rows = np.where(kept)[0]
        top2 = np.partition(vals, -2, axis=0)[-2:]
        second, top = top2[0], top2[1]
        is_top = vals == top[None, :]
        unique_top = is_top.sum(axis=0) == 1
        gain_per_edge = np.where(unique_top, top - second, 0.0)
        reductions = is_top @ gain_per_edge
        kept[rows[int(np.argmax(reductions))]] = False
    return kept


def compute_hold_bounds(graph: TimingGraph, model: DelayModel,
                        sample_count: int, target: float,
                        seed: int = 0,
                        exact_cap: int = EXACT_HOLD_CAP) -> HoldModel:
    """Synthesize per-edge skew floors meeting the hold-yield target.

    Draws joint samples of every hold margin, keeps at least
    ``ceil(target * sample_count)`` of them fully covered, and sets each
    floor to the maximum margin over the kept samples while minimizing the
    floor sum.  Exact selection for small sample counts, greedy
    drop-the-worst above ``exact_cap``.
    """
    if not 0.0 < target <= 1.0:
        raise ConfigurationError("hold yield target must be in (0, 1]")
    if sample_count < 100:
        raise ConfigurationError("need at least 100 hold samples")
    edge_ids, samples = _sample_hold_margins(graph, model, sample_count, seed)
    keep_count = math.ceil(target * sample_count)
    if keep_count >= sample_count:
        kept = np.ones(sample_count, dtype=bool)
        exact = True
    elif sample_count <= exact_cap:
        kept = _exact_hold_floors(samples, keep_count)
        exact = True
    else:
        kept = _greedy_hold_floors(samples, keep_count)
        exact = False
    floors_vec = samples[kept].max(axis=0)
    floors = {e: float(v) for e, v in zip(edge_ids, floors_vec)}
    return HoldModel(sample_count=sample_count, target=target,
                     samples=samples, kept=kept, floors=floors, exact=exact)


# ---------------------------------------------------------------------------
# Buffer configuration


def _edge_groups(problem: ConfigProblem, pessimistic: bool):
    """Collapse edges sharing the same buffered-endpoint pair.

    Within such a group the skew term is identical, so only the worst upper
    bound, worst lower bound, and worst hold floor can bind; this keeps the
    model size tied to the buffer count, not the path count.
    """
    graph = problem.graph
    groups: dict[tuple[str | None, str | None], dict] = {}
    for eid, edge in graph.edges.items():
        lo, hi = problem.bounds[eid]
        if pessimistic:
            lo = hi
        src = edge.src if graph.flip_flops[edge.src].buffer else None
        dst = edge.dst if graph.flip_flops[edge.dst].buffer else None
        key = (src, dst)
        g = groups.setdefault(key, {"max_u": -np.inf, "max_l": -np.inf,
                                    "floor": -np.inf, "edges": []})
        g["max_u"] = max(g["max_u"], hi)
        g["max_l"] = max(g["max_l"], lo)
        g["edges"].append(eid)
        floor = problem.hold_floors.get(eid, -np.inf)
        g["floor"] = max(g["floor"], floor)
    return groups


def configure_buffers(problem: ConfigProblem, *,
                      pessimistic: bool = False) -> ConfigResult:
    """Find grid buffer values covering every path at the designated period.

    Minimizes the largest gap between any path's interval top and its
    assumed delay; an infeasible model means the chip is declared failing
    and the blocking edge groups are reported.  ``pessimistic`` pins every
    assumed delay to its interval top (pure feasibility).
    """
    problem.validate()
    graph = problem.graph
    t_d = problem.designated_period
    groups = _edge_groups(problem, pessimistic)

    xi_floor = 0.0
    tight: list[str] = []
    for (src, dst), g in sorted(groups.items(), key=lambda kv: str(kv[0])):
        if src is None and dst is None:
            if g["max_l"] > t_d + 1e-9 or g["floor"] > 1e-9:
                tight.extend(g["edges"])
            xi_floor = max(xi_floor, g["max_u"] - t_d)
    if tight:
        return ConfigResult(feasible=False, tight=sorted(tight))

    buffered = graph.buffered_nodes()
    if not buffered:
        xi = max(0.0, xi_floor)
        assumed = {e: min(problem.bounds[e][1], t_d)
                   for e in graph.edges}
        if pessimistic:
            assumed = {e: problem.bounds[e][1] for e in graph.edges}
        return ConfigResult(feasible=True, assumed_delays=assumed,
                            slack_gap=xi)

    model = mip.MipModel()
    xi = model.add_var("gap", max(0.0, xi_floor), np.inf)
    step_var: dict[str, int] = {}
    starts: dict[str, float] = {}
    deltas: dict[str, float] = {}
    for node in buffered:
        buf = graph.flip_flops[node].buffer
        step_var[node] = model.add_var(f"step_{node}", 0, buf.step_count - 1,
                                       integer=True)
        starts[node] = buf.range_start
        deltas[node] = buf.grid_step

    group_rows: list[tuple[tuple, dict]] = []
    for key, g in sorted(groups.items(), key=lambda kv: str(kv[0])):
        src, dst = key
        if src is None and dst is None:
            continue
        coeffs: dict[int, float] = {}
        const = 0.0
        for node, sign in ((src, 1.0), (dst, -1.0)):
            if node is None:
                continue
            v = step_var[node]
            coeffs[v] = coeffs.get(v, 0.0) + sign * deltas[node]
            const += sign * starts[node]
        # gap >= max_u - T_d + skew
        model.add_constraint({**coeffs, xi: -1.0}, "<=",
                             float(t_d - g["max_u"] - const))
        # assumed delay must stay above the lower bound: skew <= T_d - max_l
        model.add_constraint(dict(coeffs), "<=", float(t_d - g["max_l"] - const))
        if np.isfinite(g["floor"]):
            model.add_constraint(dict(coeffs), ">=", float(g["floor"] - const))
        group_rows.append((key, g))

    model.set_objective({xi: 1.0})
    sol = mip.solve(model)
    if sol.status is not mip.SolveStatus.OPTIMAL:
        blocked = _diagnose_groups(group_rows, graph, t_d)
        return ConfigResult(feasible=False, tight=blocked)

    steps = {node: int(round(sol.x[v])) for node, v in step_var.items()}
    values = {node: starts[node] + deltas[node] * steps[node]
              for node in buffered}

    assumed: dict[str, float] = {}
    gap = max(0.0, xi_floor)
    for eid, edge in graph.edges.items():
        lo, hi = problem.bounds[eid]
        if pessimistic:
            lo = hi
        skew = (values.get(edge.src, 0.0) if graph.flip_flops[edge.src].buffer else 0.0) \
            - (values.get(edge.dst, 0.0) if graph.flip_flops[edge.dst].buffer else 0.0)
        d_assumed = min(hi, t_d - skew)
        assumed[eid] = d_assumed
        gap = max(gap, hi - d_assumed)
    return ConfigResult(feasible=True, steps=steps, values=values,
                        assumed_delays=assumed, slack_gap=float(gap))


def _diagnose_groups(group_rows, graph: TimingGraph, t_d: float) -> list[str]:
    """Name the edge groups whose own skew window is empty or conflicting."""
    blocked: list[str] = []
    for (src, dst), g in group_rows:
        lo_reach = 0.0
        hi_reach = 0.0
        for node, sign in ((src, 1.0), (dst, -1.0)):
            if node is None:
                continue
            buf = graph.flip_flops[node].buffer
            vals = (buf.range_start, buf.range_start + buf.range_width)
            lo_reach += min(sign * vals[0], sign * vals[1])
            hi_reach += max(sign * vals[0], sign * vals[1])
        upper = t_d - g["max_l"]
        floor = g["floor"]
        if floor > upper + 1e-12 or lo_reach > upper + 1e-12 \
                or (np.isfinite(floor) and hi_reach < floor - 1e-12):
            blocked.extend(g["edges"])
    if not blocked:
        blocked = sorted(e for _, g in group_rows for e in g["edges"])
    return sorted(set(blocked))


# ---------------------------------------------------------------------------
# Yield evaluation


def _skew(values: Mapping[str, float], graph: TimingGraph, edge) -> float:
    a = values.get(edge.src, 0.0)
    b = values.get(edge.dst, 0.0)
    return a - b


def _passes(chip: ChipInstance, model: DelayModel, graph: TimingGraph,
            values: Mapping[str, float], period: float) -> tuple[bool, bool]:
    setup_ok = True
    hold_ok = True
    for eid, edge in graph.edges.items():
        skew = _skew(values, graph, edge)
        if chip.true_delays[model.index_of(eid, SETUP)] + skew > period + 1e-12:
            setup_ok = False
        if skew < chip.true_delays[model.index_of(eid, HOLD)] - 1e-12:
            hold_ok = False
        if not setup_ok and not hold_ok:
            break
    return setup_ok, hold_ok


def evaluate_yield(chips: Iterable[ChipInstance],
                   configurations: Mapping[int, ConfigResult | None],
                   graph: TimingGraph, model: DelayModel, period: float,
                   hold_floors: Mapping[str, float]) -> YieldReport:
    """Score chips at one period: measured-bounds configs vs exact-delay
    configs vs no buffers at all.

    A chip counts toward the tested yield only if its configuration exists,
    is feasible, and the chip then meets every setup and hold check on its
    true sampled delays.  The ideal yield re-solves configuration per chip
    with exact delays as bounds (lower = upper = truth).
    """
    verdicts: list[ChipVerdict] = []
    n = 0
    ideal_hits = 0
    tested_hits = 0
    nobuf_hits = 0
    zero = {}
    for chip in chips:
        n += 1
        cfg = configurations.get(chip.chip_id)
        feasible = cfg is not None and cfg.feasible
        setup_ok = hold_ok = False
        gap = None
        if feasible:
            setup_ok, hold_ok = _passes(chip, model, graph, cfg.values, period)
            gap = cfg.slack_gap

        exact_bounds = {eid: (chip.true_delays[model.index_of(eid, SETUP)],) * 2
                        for eid in graph.edges}
        ideal_cfg = configure_buffers(ConfigProblem(
            designated_period=period, bounds=exact_bounds, graph=graph,
            hold_floors=hold_floors))
        ideal_pass = False
        if ideal_cfg.feasible:
            s_ok, h_ok = _passes(chip, model, graph, ideal_cfg.values, period)
            ideal_pass = s_ok and h_ok

        nb_setup, nb_hold = _passes(chip, model, graph, zero, period)
        nobuf = nb_setup and nb_hold

        verdict = ChipVerdict(chip_id=chip.chip_id, feasible=feasible,
                              setup_pass=setup_ok, hold_pass=hold_ok,
                              slack_gap=gap, ideal_pass=ideal_pass,
                              no_buffer_pass=nobuf)
        verdicts.append(verdict)
        ideal_hits += ideal_pass
        tested_hits += verdict.passes
        nobuf_hits += nobuf
    if n == 0:
        return YieldReport(period, 0.0, 0.0, 0.0, [])
    return YieldReport(period=period,
                       yield_ideal=ideal_hits / n,
                       yield_tested=tested_hits / n,
                       yield_no_buffer=nobuf_hits / n,
                       verdicts=verdicts)
