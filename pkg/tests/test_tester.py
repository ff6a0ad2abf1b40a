"""Aligned frequency stepping: alignment solve, pass/fail, bound updates."""

import numpy as np
import pytest

from tunetest import tester
from tunetest.tester import (AlignmentCache, TesterConfig,
                             apply_frequency_step, bisection_iterations,
                             compute_frequency, make_initial_bounds,
                             run_batch_test, run_chip_test)
from tunetest.timing import (DelayModel, FlipFlop, TimingEdge, TimingGraph,
                             TuningBuffer, ChipInstance)


def build_graph(edge_pairs, buffers=None, period=10.0):
    """buffers: node -> (range_start, range_width, step_count, step)."""
    buffers = buffers or {}
    nodes = sorted({n for pair in edge_pairs.values() for n in pair})
    flip_flops = {}
    for n in nodes:
        buf = None
        if n in buffers:
            r, w, sc, step = buffers[n]
            buf = TuningBuffer(r, w, sc, step)
        flip_flops[n] = FlipFlop(id=n, buffer=buf)
    edges = {}
    for i, (eid, (src, dst)) in enumerate(sorted(edge_pairs.items())):
        edges[eid] = TimingEdge(id=eid, src=src, dst=dst,
                                setup_var=i, hold_var=-1)
    return TimingGraph(flip_flops=flip_flops, edges=edges,
                       designated_period=period)


def model_for(graph, means, sigmas):
    ids = sorted(graph.edges)
    sig = np.asarray(sigmas, dtype=float)
    cov = np.diag(sig ** 2)
    return DelayModel(means=np.asarray(means, dtype=float), covariance=cov,
                      labels=[(e, "setup") for e in ids])


# ---------------------------------------------------------------------------
# compute_frequency


def test_single_edge_midpoint():
    graph = build_graph({"p0": ("a", "b")})
    res = compute_frequency(["p0"], {"p0": (4.0, 6.0)}, graph, {})
    assert res.period == pytest.approx(5.0)
    assert res.objective == pytest.approx(0.0)
    assert res.method == "median"


def test_two_coincident_centers():
    graph = build_graph({"p0": ("a", "b"), "p1": ("c", "d")})
    res = compute_frequency(["p0", "p1"],
                            {"p0": (4.0, 6.0), "p1": (3.0, 7.0)}, graph, {})
    assert res.period == pytest.approx(5.0)
    assert res.objective == pytest.approx(0.0)


def brute_force_objective(centers, weights, shift_grids, coef, fine=1e-3):
    """Oracle: full buffer-grid cross product x fine period sweep."""
    import itertools
    best = np.inf
    lo = min(centers) - 3.0
    hi = max(centers) + 3.0
    sweep = np.arange(lo, hi + fine, fine)
    for combo in itertools.product(*shift_grids):
        shifted = np.asarray(centers) + np.asarray(coef) @ np.asarray(combo) \
            if len(combo) else np.asarray(centers)
        objs = np.sum(np.asarray(weights)[None, :] *
                      np.abs(sweep[:, None] - shifted[None, :]), axis=1)
        best = min(best, float(objs.min()))
    return best


def test_sink_buffer_pulls_centers_together():
    # second edge's sink carries the buffer: shift of p1 is -x in [-1.5, 0]
    graph = build_graph({"p0": ("a", "b"), "p1": ("c", "d")},
                        buffers={"d": (0.0, 1.5, 4, 0)})
    res = compute_frequency(["p0", "p1"],
                            {"p0": (4.0, 6.0), "p1": (7.0, 9.0)}, graph, {})
    # optimum shifts the second center from 8 to 6.5 and parks the period
    # on the heavier (middle-of-sorted) center
    assert res.values == {"d": pytest.approx(1.5)}
    assert res.period == pytest.approx(5.0)
    weights = [1000.0, 999.0]
    oracle = brute_force_objective([5.0, 8.0], weights,
                                   [np.array([0.0, 0.5, 1.0, 1.5])],
                                   coef=np.array([[0.0], [-1.0]]))
    assert res.objective == pytest.approx(oracle, abs=1e-3 * 1000)


def test_disjoint_ranges_period_at_heavier_center():
    # even at the buffer limit the ranges stay disjoint (Fig-6e shape)
    graph = build_graph({"p0": ("a", "b"), "p1": ("c", "d")},
                        buffers={"d": (0.0, 1.0, 3, 0)})
    res = compute_frequency(["p0", "p1"],
                            {"p0": (-1.0, 1.0), "p1": (9.0, 11.0)}, graph, {})
    assert res.period == pytest.approx(0.0)  # center of the larger weight


def test_mip_routes_match_enumeration():
    rng = np.random.default_rng(12)
    for trial in range(10):
        n_edges = int(rng.integers(1, 4))
        pairs = {}
        buffers = {}
        coef_rows = []
        centers = []
        for i in range(n_edges):
            src, dst = f"s{trial}_{i}", f"d{trial}_{i}"
            pairs[f"p{i}"] = (src, dst)
        n_buf = int(rng.integers(1, 3))
        buf_nodes = []
        for j in range(n_buf):
            side = rng.choice(["src", "dst"])
            edge = int(rng.integers(0, n_edges))
            node = pairs[f"p{edge}"][0 if side == "src" else 1]
            if node in buffers:
                continue
            levels = int(rng.integers(2, 6))
            start = float(rng.uniform(-1.5, 0.0))
            width = float(rng.uniform(0.5, 2.0))
            buffers[node] = (start, width, levels, 0)
            buf_nodes.append(node)
        graph = build_graph(pairs, buffers=buffers)
        bounds = {}
        for i in range(n_edges):
            c = float(rng.uniform(3.0, 9.0))
            w = float(rng.uniform(0.5, 2.0))
            centers.append(c)
            bounds[f"p{i}"] = (c - w, c + w)

        enum_res = compute_frequency(sorted(pairs), bounds, graph, {})
        mip_res = compute_frequency(sorted(pairs), bounds, graph, {},
                                    grid_cap=0)
        ind_res = compute_frequency(sorted(pairs), bounds, graph, {},
                                    encoding="indicator")
        assert mip_res.method == "mip"
        assert enum_res.objective == pytest.approx(mip_res.objective,
                                                   abs=1e-6 * 1000)
        assert enum_res.objective == pytest.approx(ind_res.objective,
                                                   abs=1e-6 * 1000)

        buf_grids = []
        coef = np.zeros((n_edges, len(buf_nodes)))
        for j, node in enumerate(buf_nodes):
            r, w, sc, _ = buffers[node]
            buf_grids.append(r + (w / (sc - 1)) * np.arange(sc))
            for i in range(n_edges):
                src, dst = pairs[f"p{i}"]
                if src == node:
                    coef[i, j] += 1.0
                if dst == node:
                    coef[i, j] -= 1.0
        order = np.argsort([0.5 * (bounds[f"p{i}"][0] + bounds[f"p{i}"][1])
                            for i in range(n_edges)], kind="stable")
        weights = np.empty(n_edges)
        mid = (n_edges - 1) // 2
        for pos, idx in enumerate(order):
            weights[idx] = 1000.0 - 1.0 * abs(pos - mid)
        oracle = brute_force_objective(centers, weights, buf_grids, coef)
        assert enum_res.objective == pytest.approx(oracle, abs=1e-3 * 1000)


def test_hold_floor_restricts_buffer():
    # shift of p0 is +x (buffer on source); hold floor forces x >= 0.5
    graph = build_graph({"p0": ("a", "b")},
                        buffers={"a": (-1.0, 2.0, 5, 2)})
    res = compute_frequency(["p0"], {"p0": (4.0, 6.0)}, graph,
                            {"p0": 0.5})
    assert res.values["a"] >= 0.5 - 1e-12
    # infeasible floor beyond the grid reach
    with pytest.raises(tester.AlignmentInfeasibleError):
        compute_frequency(["p0"], {"p0": (4.0, 6.0)}, graph, {"p0": 2.0})
    with pytest.raises(tester.AlignmentInfeasibleError):
        compute_frequency(["p0"], {"p0": (4.0, 6.0)}, graph, {"p0": 2.0},
                          grid_cap=0)


def test_cache_hits_identical_states():
    graph = build_graph({"p0": ("a", "b")})
    cache = AlignmentCache()
    b = {"p0": (4.0, 6.0)}
    r1 = compute_frequency(["p0"], b, graph, {}, cache=cache)
    r2 = compute_frequency(["p0"], b, graph, {}, cache=cache)
    assert cache.hits == 1 and cache.misses == 1
    assert r1 is r2


# ---------------------------------------------------------------------------
# apply_frequency_step


def test_pass_fail_threshold():
    graph = build_graph({"p0": ("a", "b")})
    model = model_for(graph, [8.0], [1.0])
    chip = ChipInstance(0, np.array([7.9]))
    assert apply_frequency_step(["p0"], chip, model, graph, 8.0) == {"p0": True}
    chip = ChipInstance(0, np.array([8.1]))
    assert apply_frequency_step(["p0"], chip, model, graph, 8.0) == {"p0": False}


def loop_fixture():
    """Four flip-flops in a loop; tuning drops the min period from 8 to 5.5."""
    pairs = {"p01": ("f0", "f1"), "p12": ("f1", "f2"),
             "p23": ("f2", "f3"), "p30": ("f3", "f0")}
    buffers = {n: (-3.0, 6.0, 13, 6) for n in ("f0", "f1", "f2", "f3")}
    graph = build_graph(pairs, buffers=buffers)
    delays = {"p01": 3.0, "p12": 8.0, "p23": 5.5, "p30": 5.5}
    ids = sorted(pairs)
    model = model_for(graph, [delays[e] for e in ids], [1.0] * 4)
    chip = ChipInstance(0, np.array([delays[e] for e in ids]))
    return graph, model, chip


def test_loop_passes_at_tuned_period():
    graph, model, chip = loop_fixture()
    # shift the launching edge of the slow f1->f2 path 2.5 units earlier
    graph.flip_flops["f1"].buffer.set_step(1)  # value -2.5
    verdicts = apply_frequency_step(sorted(graph.edges), chip, model, graph, 5.5)
    assert all(verdicts.values())
    verdicts = apply_frequency_step(sorted(graph.edges), chip, model, graph, 5.4)
    assert not all(verdicts.values())


# ---------------------------------------------------------------------------
# run_batch_test / run_chip_test


def test_bisection_count_powers():
    graph = build_graph({"p0": ("a", "b")})
    model = model_for(graph, [10.0], [1.0])
    chip = ChipInstance(0, np.array([10.3]))
    for power, expect in ((8, 8), (6, 6)):
        eps = 6.0 / 2 ** power
        bounds, iters = run_batch_test(["p0"], chip, model, graph,
                                       TesterConfig(resolution=eps), {})
        assert iters == expect == bisection_iterations(6.0, eps)
        assert bounds["p0"].lower <= 10.3 <= bounds["p0"].upper
        assert bounds["p0"].width <= eps * (1 + 1e-9)


def test_out_of_window_collapses_to_edge():
    graph = build_graph({"p0": ("a", "b")})
    model = model_for(graph, [10.0], [1.0])  # window [7, 13]
    chip = ChipInstance(0, np.array([14.0]))
    log = []
    bounds, _ = run_batch_test(["p0"], chip, model, graph,
                               TesterConfig(resolution=6.0 / 256), {}, log=log)
    assert bounds["p0"].upper == pytest.approx(13.0)
    assert bounds["p0"].lower == pytest.approx(13.0, abs=6.0 / 256 * 1.01)
    assert any("p0" in rec.boundary for rec in log)


def test_aligned_pair_measured_for_price_of_one():
    # identical ranges and identical behavior: every verdict coincides, so
    # the whole pair rides one bisection ladder
    graph = build_graph({"p0": ("a", "b"), "p1": ("c", "d")})
    model = model_for(graph, [10.0, 10.0], [1.0, 1.0])
    chip = ChipInstance(0, np.array([10.3, 10.3]))
    eps = 6.0 / 256
    bounds, iters = run_batch_test(["p0", "p1"], chip, model, graph,
                                   TesterConfig(resolution=eps), {})
    assert iters == bisection_iterations(6.0, eps)
    for eid in ("p0", "p1"):
        assert bounds[eid].lower <= 10.3 <= bounds[eid].upper


def test_bound_monotonicity_and_bracketing():
    rng = np.random.default_rng(3)
    pairs = {"p0": ("a", "h"), "p1": ("h", "b"), "p2": ("c", "d")}
    buffers = {"h": (-0.5, 1.0, 5, 2)}
    graph = build_graph(pairs, buffers=buffers)
    means = [10.0, 8.0, 9.0]
    sigs = [0.8, 0.6, 0.7]
    model = model_for(graph, means, sigs)
    eps = 6.0 * np.mean(sigs) / 256
    for trial in range(40):
        true = np.array([rng.normal(m, s) for m, s in zip(means, sigs)])
        chip = ChipInstance(trial, true)
        log = []
        bounds, _ = run_batch_test(sorted(pairs), chip, model, graph,
                                   TesterConfig(resolution=eps), {}, log=log)
        widths = {e: np.inf for e in pairs}
        prev = make_initial_bounds(model, pairs)
        for rec in log:
            for eid, (lo, hi) in rec.bounds.items():
                plo, phi = prev[eid]
                assert lo >= plo - 1e-12 and hi <= phi + 1e-12
                prev[eid] = (lo, hi)
                widths[eid] = hi - lo
        start = make_initial_bounds(model, pairs)
        ids = sorted(pairs)
        for i, eid in enumerate(ids):
            if start[eid][0] <= true[i] <= start[eid][1]:
                assert bounds[eid].lower <= true[i] + 1e-12
                assert bounds[eid].upper >= true[i] - 1e-12


def test_log_replay_reconstructs_bounds():
    pairs = {"p0": ("a", "h"), "p1": ("h", "b")}
    buffers = {"h": (-0.5, 1.0, 5, 2)}
    graph = build_graph(pairs, buffers=buffers)
    model = model_for(graph, [10.0, 8.5], [0.8, 0.6])
    chip = ChipInstance(7, np.array([10.5, 8.2]))
    eps = 0.02
    log = []
    run_batch_test(sorted(pairs), chip, model, graph,
                   TesterConfig(resolution=eps), {}, log=log)
    # replay: reapply every recorded update from the initial window
    replay = {e: list(b) for e, b in make_initial_bounds(model, pairs).items()}
    for rec in log:
        values = {}
        for node, ff in graph.flip_flops.items():
            if ff.buffer:
                values[node] = ff.buffer.grid()[rec.steps[node]] \
                    if node in rec.steps else ff.buffer.value
        for eid, ok in rec.passed.items():
            e = graph.edges[eid]
            shift = values.get(e.src, 0.0) - values.get(e.dst, 0.0)
            cut = rec.period - shift
            lo, hi = replay[eid]
            if ok:
                hi = max(min(hi, cut), lo)
            else:
                lo = min(max(lo, cut), hi)
            replay[eid] = [lo, hi]
            assert (lo, hi) == rec.bounds[eid]


def test_run_chip_test_totals_and_reset():
    pairs = {"p0": ("a", "h"), "p1": ("h", "b")}
    buffers = {"h": (-0.5, 1.0, 5, 2)}
    graph = build_graph(pairs, buffers=buffers)
    model = model_for(graph, [10.0, 8.5], [0.8, 0.6])
    chip = ChipInstance(0, np.array([10.1, 8.6]))
    cfg = TesterConfig(resolution=0.05)
    bounds, total = run_chip_test([["p0"], ["p1"]], chip, model, graph, cfg, {})
    assert set(bounds) == {"p0", "p1"}
    assert total == (bisection_iterations(6 * 0.8, 0.05)
                     + bisection_iterations(6 * 0.6, 0.05))
    assert graph.flip_flops["h"].buffer.step == 2  # reset to pre-test state
    _, zero = run_chip_test([], chip, model, graph, cfg, {})
    assert zero == 0


def test_iteration_guard_trips_as_logic_error():
    graph = build_graph({"p0": ("a", "b")})
    model = model_for(graph, [10.0], [1.0])
    chip = ChipInstance(0, np.array([10.0]))
    with pytest.raises(tester.TesterLogicError):
        run_batch_test(["p0"], chip, model, graph,
                       TesterConfig(resolution=1e-9, max_iterations=5), {})
