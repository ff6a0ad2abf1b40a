"""Hold floors, buffer configuration, yield evaluation."""

import itertools

import numpy as np
import pytest

from tunetest import configurator
from tunetest.configurator import (ConfigProblem, ConfigResult,
                                   compute_hold_bounds, configure_buffers,
                                   evaluate_yield)
from tunetest.timing import (ChipInstance, DelayModel, FlipFlop, TimingEdge,
                             TimingGraph, TuningBuffer, GeneratorConfig,
                             generate_benchmark, sample_chip)


def hold_graph_model(n_edges, hold_means, hold_sigmas, corr=0.0):
    """Chain graph whose model carries setup and hold vars per edge."""
    nodes = [f"f{i}" for i in range(n_edges + 1)]
    flip_flops = {n: FlipFlop(id=n) for n in nodes}
    edges = {}
    labels = []
    for i in range(n_edges):
        eid = f"p{i:02d}"
        edges[eid] = TimingEdge(id=eid, src=nodes[i], dst=nodes[i + 1],
                                setup_var=i, hold_var=n_edges + i)
    means = np.concatenate([np.full(n_edges, 5.0), np.asarray(hold_means)])
    sig_setup = np.full(n_edges, 0.5)
    sig = np.concatenate([sig_setup, np.asarray(hold_sigmas)])
    rho = np.full((n_edges, n_edges), corr)
    np.fill_diagonal(rho, 1.0)
    cov = np.zeros((2 * n_edges, 2 * n_edges))
    cov[:n_edges, :n_edges] = np.outer(sig_setup, sig_setup) * rho
    cov[n_edges:, n_edges:] = np.outer(sig[n_edges:], sig[n_edges:]) * rho
    labels = [(e, "setup") for e in sorted(edges)] + \
             [(e, "hold") for e in sorted(edges)]
    model = DelayModel(means=means, covariance=cov, labels=labels)
    graph = TimingGraph(flip_flops=flip_flops, edges=edges,
                        designated_period=10.0)
    return graph, model


# ---------------------------------------------------------------------------
# compute_hold_bounds


def test_single_path_floor_is_target_quantile():
    graph, model = hold_graph_model(1, [-1.0], [0.4])
    hm = compute_hold_bounds(graph, model, sample_count=1000, target=0.99,
                             seed=5)
    samples = np.sort(hm.samples[:, 0])
    assert hm.floors["p00"] == pytest.approx(samples[989])
    assert hm.kept_fraction() >= 0.99


def test_non_binding_floors_stay_non_positive():
    graph, model = hold_graph_model(3, [-2.0, -1.8, -2.2], [0.1, 0.1, 0.1])
    hm = compute_hold_bounds(graph, model, sample_count=400, target=0.99,
                             seed=2)
    assert all(v <= 0.0 for v in hm.floors.values())


def test_target_one_keeps_every_sample():
    graph, model = hold_graph_model(2, [-1.0, -0.5], [0.3, 0.3])
    hm = compute_hold_bounds(graph, model, sample_count=150, target=1.0,
                             seed=3)
    assert hm.kept.all()
    for j, eid in enumerate(sorted(graph.edges)):
        assert hm.floors[eid] == pytest.approx(hm.samples[:, j].max())


def test_exact_selection_matches_brute_force():
    graph, model = hold_graph_model(2, [-0.5, -0.6], [0.5, 0.4], corr=0.3)
    hm = compute_hold_bounds(graph, model, sample_count=100, target=0.98,
                             seed=9)  # drop 2, exact MILP path
    assert hm.exact
    samples = hm.samples
    best = np.inf
    for drop in itertools.combinations(range(100), 2):
        mask = np.ones(100, dtype=bool)
        mask[list(drop)] = False
        best = min(best, float(samples[mask].max(axis=0).sum()))
    assert sum(hm.floors.values()) == pytest.approx(best, abs=1e-9)


def test_greedy_meets_target_and_tracks_exact():
    graph, model = hold_graph_model(2, [-0.5, -0.6], [0.5, 0.4], corr=0.3)
    exact = compute_hold_bounds(graph, model, sample_count=150, target=0.99,
                                seed=4, exact_cap=300)  # one droppable sample
    greedy = compute_hold_bounds(graph, model, sample_count=150, target=0.99,
                                 seed=4, exact_cap=0)
    assert exact.exact and not greedy.exact
    assert greedy.kept_fraction() >= 0.99
    # single drop: greedy's steepest-descent step is optimal, so they agree
    assert sum(greedy.floors.values()) == pytest.approx(
        sum(exact.floors.values()), abs=1e-9)


def test_hold_validation():
    graph, model = hold_graph_model(1, [-1.0], [0.2])
    with pytest.raises(configurator.ConfigurationError):
        compute_hold_bounds(graph, model, sample_count=1000, target=1.2)
    with pytest.raises(configurator.ConfigurationError):
        compute_hold_bounds(graph, model, sample_count=50, target=0.9)


# ---------------------------------------------------------------------------
# configure_buffers


def loop_problem(period, delays=(3.0, 8.0, 5.5, 5.5)):
    nodes = ["f0", "f1", "f2", "f3"]
    flip_flops = {n: FlipFlop(id=n, buffer=TuningBuffer(-3.0, 6.0, 13, 6))
                  for n in nodes}
    edges = {}
    ids = ["p01", "p12", "p23", "p30"]
    for i, eid in enumerate(ids):
        edges[eid] = TimingEdge(id=eid, src=nodes[i],
                                dst=nodes[(i + 1) % 4],
                                setup_var=i, hold_var=-1)
    graph = TimingGraph(flip_flops=flip_flops, edges=edges,
                        designated_period=period)
    bounds = {eid: (d, d) for eid, d in zip(ids, delays)}
    return ConfigProblem(designated_period=period, bounds=bounds,
                         graph=graph, hold_floors={})


def test_loop_feasible_at_tuned_period_not_below():
    res = configure_buffers(loop_problem(5.5))
    assert res.feasible
    assert res.slack_gap == pytest.approx(0.0, abs=1e-9)
    skew = res.values["f1"] - res.values["f2"]
    assert 8.0 + skew <= 5.5 + 1e-9  # slow stage covered by borrowed budget

    res_low = configure_buffers(loop_problem(5.4))
    assert not res_low.feasible
    assert res_low.tight  # blocking groups named


def test_no_tuning_needed_when_bounds_fit():
    res = configure_buffers(loop_problem(9.0))
    assert res.feasible
    assert res.slack_gap == pytest.approx(0.0, abs=1e-9)
    for eid, (lo, hi) in loop_problem(9.0).bounds.items():
        assert res.assumed_delays[eid] == pytest.approx(hi)


def random_config_instance(rng, levels=3):
    nodes = ["a", "b", "h1", "h2"]
    flip_flops = {}
    for n in nodes:
        buf = None
        if n.startswith("h"):
            start = float(rng.uniform(-1.0, -0.2))
            width = float(rng.uniform(0.6, 1.6))
            buf = TuningBuffer(start, width, levels, 0)
        flip_flops[n] = FlipFlop(id=n, buffer=buf)
    pair_pool = [("a", "h1"), ("h1", "b"), ("b", "h2"), ("h2", "a"),
                 ("h1", "h2")]
    edges = {}
    for i, (src, dst) in enumerate(pair_pool):
        eid = f"p{i}"
        edges[eid] = TimingEdge(id=eid, src=src, dst=dst, setup_var=i,
                                hold_var=-1)
    graph = TimingGraph(flip_flops=flip_flops, edges=edges,
                        designated_period=8.0)
    t_d = 8.0
    bounds = {}
    floors = {}
    for eid in edges:
        lo = float(rng.uniform(6.2, 8.4))
        hi = lo + float(rng.uniform(0.0, 0.8))
        bounds[eid] = (lo, hi)
        if rng.random() < 0.5:
            floors[eid] = float(rng.uniform(-1.0, 0.1))
    return ConfigProblem(designated_period=t_d, bounds=bounds, graph=graph,
                         hold_floors=floors), t_d


def oracle_min_gap(problem, t_d):
    graph = problem.graph
    hubs = graph.buffered_nodes()
    grids = [graph.flip_flops[h].buffer.grid() for h in hubs]
    best = None
    for combo in itertools.product(*grids):
        values = dict(zip(hubs, combo))
        feasible = True
        gap = 0.0
        for eid, edge in graph.edges.items():
            lo, hi = problem.bounds[eid]
            skew = values.get(edge.src, 0.0) - values.get(edge.dst, 0.0)
            if t_d - skew < lo - 1e-12:
                feasible = False
                break
            floor = problem.hold_floors.get(eid)
            if floor is not None and skew < floor - 1e-12:
                feasible = False
                break
            gap = max(gap, hi - min(hi, t_d - skew))
        if feasible:
            best = gap if best is None else min(best, gap)
    return best


@pytest.mark.parametrize("seed", range(25))
def test_min_gap_matches_enumeration(seed):
    rng = np.random.default_rng(300 + seed)
    problem, t_d = random_config_instance(rng)
    res = configure_buffers(problem)
    oracle = oracle_min_gap(problem, t_d)
    if oracle is None:
        assert not res.feasible
    else:
        assert res.feasible
        assert res.slack_gap == pytest.approx(oracle, abs=1e-6)


def test_pessimistic_config_guarantees_setup():
    rng = np.random.default_rng(11)
    for seed in range(20):
        problem, t_d = random_config_instance(np.random.default_rng(500 + seed))
        res = configure_buffers(problem, pessimistic=True)
        if not res.feasible:
            continue
        graph = problem.graph
        for eid, edge in graph.edges.items():
            hi = problem.bounds[eid][1]
            skew = res.values.get(edge.src, 0.0) - res.values.get(edge.dst, 0.0)
            # any true delay at or below its upper bound meets the period
            assert hi + skew <= t_d + 1e-9


def test_unfixable_plain_edge_reported():
    nodes = {"a": FlipFlop(id="a"), "b": FlipFlop(id="b")}
    edges = {"p0": TimingEdge(id="p0", src="a", dst="b", setup_var=0,
                              hold_var=-1)}
    graph = TimingGraph(flip_flops=nodes, edges=edges, designated_period=5.0)
    problem = ConfigProblem(designated_period=5.0,
                            bounds={"p0": (6.0, 6.5)}, graph=graph,
                            hold_floors={})
    res = configure_buffers(problem)
    assert not res.feasible
    assert res.tight == ["p0"]


# ---------------------------------------------------------------------------
# evaluate_yield


def small_benchmark(seed=21):
    cfg = GeneratorConfig(n_flip_flops=40, buffer_fraction=0.05, n_edges=50,
                          cluster_count=3, intra_cluster_corr=0.9,
                          global_corr=0.25, mean_delay_range=(4.0, 7.0),
                          cv=0.10, seed=seed)
    return generate_benchmark(cfg)


def test_no_buffer_yield_near_half_at_median_period():
    graph, model = small_benchmark()
    setup_idx = model.indices("setup")
    floors = compute_hold_bounds(graph, model, 500, 0.99, seed=6).floors
    chips = [sample_chip(model, 77, i) for i in range(300)]
    crit = np.array([c.true_delays[setup_idx].max() for c in chips])
    period = float(np.median(crit))
    zero_cfg = {c.chip_id: ConfigResult(feasible=True, values={})
                for c in chips}
    report = evaluate_yield(chips, zero_cfg, graph, model, period, floors)
    assert abs(report.yield_no_buffer - 0.5) < 0.08
    assert report.yield_tested == pytest.approx(report.yield_no_buffer)
    assert report.yield_drop == report.yield_ideal - report.yield_tested


def test_ideal_yield_beats_no_buffer():
    # without skew floors the setup-only configurator would trade hold
    # safety away; with them the tuned yield must beat the untuned one
    graph, model = small_benchmark()
    setup_idx = model.indices("setup")
    floors = compute_hold_bounds(graph, model, 500, 0.99, seed=7).floors
    chips = [sample_chip(model, 78, i) for i in range(200)]
    crit = np.array([c.true_delays[setup_idx].max() for c in chips])
    period = float(np.median(crit))
    zero_cfg = {c.chip_id: ConfigResult(feasible=True, values={})
                for c in chips}
    report = evaluate_yield(chips, zero_cfg, graph, model, period, floors)
    assert report.yield_ideal > report.yield_no_buffer + 0.05


def test_empty_chip_list():
    graph, model = small_benchmark()
    report = evaluate_yield([], {}, graph, model, 5.0, {})
    assert report.yield_ideal == report.yield_tested == 0.0
    assert report.verdicts == []
