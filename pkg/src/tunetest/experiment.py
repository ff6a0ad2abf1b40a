"""Experiment orchestration: benchmarks in, iteration and yield metrics out.

One run wires the whole flow together: plan which paths to measure, pack
them into batches, frequency-step every simulated chip, predict the
unmeasured delays, configure the buffers per chip and period, and score
yields against the exact-measurement ideal and the no-buffer floor.
Companion modes exist for the ablations: path-by-path stepping, batch
multiplexing with buffers pinned, and batch multiplexing with alignment but
no statistical prediction.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import __version__
from .configurator import (ConfigProblem, ConfigResult, compute_hold_bounds,
                           configure_buffers, evaluate_yield)
from .scheduler import fill_empty_slots, form_batches
from .stats import DelayPredictor, plan_test_set
from .tester import (AlignmentCache, IterationRecord, TesterConfig,
                     bisection_iterations, run_chip_test)
from .timing import (SETUP, DelayModel, GeneratorConfig, TimingGraph,
                     benchmark_from_dict, benchmark_to_dict,
                     generate_benchmark, load_benchmark, repair_psd,
                     sample_chip)

MODES = ("effitest", "baseline-pathwise", "multiplex-no-align",
         "effitest-no-prediction")


class ExperimentError(ValueError):
    pass


@dataclass
class PeriodSpec:
    label: str
    quantile: float

    def validate(self) -> None:
        if not 0.0 < self.quantile < 1.0:
            raise ExperimentError(f"period quantile {self.quantile} not in (0,1)")


@dataclass
class Seeds:
    chips: int = 1
    holds: int = 2
    periods: int = 3


@dataclass
class ExperimentConfig:
    benchmark_file: str | None = None
    generator: GeneratorConfig | None = None
    chips: int = 1000
    periods: list[PeriodSpec] = field(default_factory=lambda: [
        PeriodSpec("T1", 0.50), PeriodSpec("T2", 0.8413)])
    modes: list[str] = field(default_factory=lambda: ["effitest"])
    resolution: float | None = None
    resolution_power: int = 8
    hold_samples: int = 1000
    hold_target: float = 0.99
    sigma_scale: float = 1.0
    seeds: Seeds = field(default_factory=Seeds)
    workers: int = 1
    iteration_log: bool = False
    ablation_chips: int = 200
    name: str = "benchmark"

    def validate(self) -> None:
        if (self.benchmark_file is None) == (self.generator is None):
            raise ExperimentError("give exactly one of benchmark_file / generator")
        if self.chips < 1:
            raise ExperimentError("chip count must be at least 1")
        labels = [p.label for p in self.periods]
        quants = [p.quantile for p in self.periods]
        if len(set(labels)) != len(labels) or len(set(quants)) != len(quants):
            raise ExperimentError("periods must be distinct")
        for p in self.periods:
            p.validate()
        for mode in self.modes:
            if mode not in MODES:
                raise ExperimentError(f"unknown mode {mode!r}; pick from {MODES}")
        if not self.modes:
            raise ExperimentError("need at least one mode")
        if self.sigma_scale <= 0:
            raise ExperimentError("sigma_scale must be positive")
        if self.workers < 1:
            raise ExperimentError("workers must be at least 1")


@dataclass
class MetricsTable:
    name: str
    n_flip_flops: int
    n_gates: int
    n_buffers: int
    n_paths: int
    n_tested: int
    iters_mean: float            # average tester iterations per chip
    iters_per_tested: float      # iters_mean / n_tested
    pathwise_iters: float        # path-by-path stepping total
    pathwise_per_path: float     # pathwise_iters / n_paths
    reduction_total_pct: float
    reduction_per_path_pct: float
    prep_seconds: float
    test_seconds: float          # mean per chip
    config_seconds: float        # mean per chip

    @staticmethod
    def reductions(iters_mean: float, pathwise: float,
                   per_tested: float, per_path: float) -> tuple[float, float]:
        total = (pathwise - iters_mean) / pathwise * 100.0
        per = (per_path - per_tested) / per_path * 100.0
        return total, per


@dataclass
class ModeStats:
    mode: str
    mean_iterations: float
    iterations_per_path: float
    paths_measured: int


@dataclass
class PeriodYield:
    label: str
    period: float
    yield_ideal: float
    yield_tested: float
    yield_no_buffer: float

    @property
    def yield_drop(self) -> float:
        return self.yield_ideal - self.yield_tested


@dataclass
class ChipRow:
    chip_id: int
    period_label: str
    feasible: bool
    setup_pass: bool
    hold_pass: bool
    slack_gap: float | None
    iterations: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: MetricsTable
    period_yields: list[PeriodYield]
    mode_stats: list[ModeStats]
    chip_rows: list[ChipRow]
    iteration_log: list[IterationRecord]
    manifest: dict


def scale_sigmas(model: DelayModel, scale: float) -> DelayModel:
    """Scale per-variable standard deviations, covariances untouched.

    Scaling variances up while keeping cross terms raises the purely random
    delay share.  Down-scaling can break positive semi-definiteness, so the
    result is PSD-repaired when needed.
    """
    if scale == 1.0:
        return model
    cov = model.covariance.copy()
    diag = np.diag(cov) * scale * scale
    np.fill_diagonal(cov, diag)
    tol = 1e-9 * max(1.0, float(diag.max(initial=0.0)))
    if float(np.linalg.eigvalsh(cov).min()) < -tol:
        cov = repair_psd(cov)
    return DelayModel(means=model.means.copy(), covariance=cov,
                      labels=list(model.labels))


def default_resolution(model: DelayModel, power: int = 8) -> float:
    """Tester resolution: mean initial range width over two**power."""
    setup = model.indices(SETUP)
    mean_sigma = float(np.mean(model.sigmas()[setup]))
    return 6.0 * mean_sigma / (2 ** power)


def resolve_periods(model: DelayModel, specs: list[PeriodSpec],
                    seed: int, samples: int = 20_000) -> list[tuple[str, float]]:
    """Map quantile specs onto the no-buffer critical-delay distribution."""
    setup = model.indices(SETUP)
    cov = model.covariance[np.ix_(setup, setup)]
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(repair_psd(cov))
        factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
    rng = np.random.default_rng([seed, 0x9E71])
    draws = model.means[setup][None, :] \
        + rng.standard_normal((samples, len(setup))) @ factor.T
    crit = draws.max(axis=1)
    out = []
    for spec in specs:
        out.append((spec.label, float(np.quantile(crit, spec.quantile))))
    return out


@dataclass
class _Plan:
    """Per-mode test plan: what gets measured, in which batches, aligned?"""

    mode: str
    batches: list[list[str]]
    tested: list[str]
    align: bool
    predictor: DelayPredictor | None


def build_plan(mode: str, graph: TimingGraph, model: DelayModel) -> _Plan:
    edge_ids = graph.edge_ids()
    if mode == "effitest":
        groups, selected = plan_test_set(edge_ids, model)
        batches = form_batches(selected, graph)
        predictor0 = DelayPredictor(model, groups, selected)
        untested = sorted(set(edge_ids) - set(selected))
        batches, inserted = fill_empty_slots(batches, untested,
                                             predictor0.posterior_stds(), graph)
        tested = sorted(set(selected) | set(inserted))
        predictor = DelayPredictor(model, groups, tested)
        return _Plan(mode, [b.edges for b in batches], tested, True, predictor)
    if mode == "effitest-no-prediction":
        batches = form_batches(edge_ids, graph)
        return _Plan(mode, [b.edges for b in batches], list(edge_ids), True, None)
    if mode == "multiplex-no-align":
        batches = form_batches(edge_ids, graph)
        return _Plan(mode, [b.edges for b in batches], list(edge_ids), False, None)
    if mode == "baseline-pathwise":
        return _Plan(mode, [[e] for e in edge_ids], list(edge_ids), False, None)
    raise ExperimentError(f"unknown mode {mode!r}")


def pathwise_iteration_count(model: DelayModel, graph: TimingGraph,
                             resolution: float) -> int:
    """Chip-independent total for path-by-path stepping at this resolution."""
    total = 0
    for eid in graph.edge_ids():
        sigma = model.sigma(model.index_of(eid, SETUP))
        total += bisection_iterations(6.0 * sigma, resolution)
    return total


def _test_chips(plan: _Plan, graph: TimingGraph, model: DelayModel,
                tester_cfg: TesterConfig, hold_floors: dict,
                chip_ids: list[int], chip_seed: int,
                collect_log: bool) -> tuple[dict, float]:
    """Run the virtual tester for the given chips; returns per-chip data."""
    cache = AlignmentCache()
    out = {}
    t0 = time.perf_counter()
    for cid in chip_ids:
        chip = sample_chip(model, chip_seed, cid)
        log: list[IterationRecord] | None = [] if collect_log else None
        bounds, iters = run_chip_test(plan.batches, chip, model, graph,
                                      tester_cfg, hold_floors,
                                      align=plan.align, cache=cache, log=log)
        out[cid] = (chip, bounds, iters, log or [])
    return out, time.perf_counter() - t0


def _worker_test(args):
    plan, graph, model, tester_cfg, hold_floors, ids, seed, collect = args
    return _test_chips(plan, graph, model, tester_cfg, hold_floors, ids,
                       seed, collect)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Execute the full protocol and assemble every report table."""
    cfg.validate()
    if cfg.generator is not None:
        graph, model = generate_benchmark(cfg.generator)
        bench_source = {"generator": asdict(cfg.generator)}
    else:
        graph, model, gen_cfg = load_benchmark(cfg.benchmark_file)
        digest = hashlib.sha256(
            Path(cfg.benchmark_file).read_bytes()).hexdigest()
        bench_source = {"file": str(cfg.benchmark_file), "sha256": digest}
    model = scale_sigmas(model, cfg.sigma_scale)

    resolution = cfg.resolution or default_resolution(model,
                                                      cfg.resolution_power)
    tester_cfg = TesterConfig(resolution=resolution)
    edge_ids = graph.edge_ids()

    prep_start = time.perf_counter()
    hold_model = compute_hold_bounds(graph, model, cfg.hold_samples,
                                     cfg.hold_target, seed=cfg.seeds.holds)
    hold_floors = hold_model.floors
    plans = {mode: build_plan(mode, graph, model) for mode in cfg.modes}
    primary = plans[cfg.modes[0]]
    prep_seconds = time.perf_counter() - prep_start

    periods = resolve_periods(model, cfg.periods, cfg.seeds.periods)

    pathwise_total = pathwise_iteration_count(model, graph, resolution)
    # cross-check the closed form against one simulated chip
    probe_plan = build_plan("baseline-pathwise", graph, model)
    probe = sample_chip(model, cfg.seeds.chips, 0)
    _, probe_iters = run_chip_test(probe_plan.batches, probe, model, graph,
                                   tester_cfg, hold_floors, align=False)
    if probe_iters != pathwise_total:
        raise ExperimentError(
            f"pathwise closed form {pathwise_total} != simulated {probe_iters}")

    chip_ids = list(range(cfg.chips))
    tested_data, test_seconds = _run_mode(primary, graph, model, tester_cfg,
                                          hold_floors, chip_ids,
                                          cfg.seeds.chips, cfg.iteration_log,
                                          cfg.workers)

    iteration_log: list[IterationRecord] = []
    if cfg.iteration_log:
        for cid in chip_ids:
            iteration_log.extend(tested_data[cid][3])

    # Per-chip bound maps: measured bounds, predicted for the rest.
    config_start = time.perf_counter()
    chip_rows: list[ChipRow] = []
    period_yields: list[PeriodYield] = []
    chips_list = [tested_data[cid][0] for cid in chip_ids]
    per_period_cfgs: dict[str, dict[int, ConfigResult]] = {}
    for label, period in periods:
        per_period_cfgs[label] = {}
    for cid in chip_ids:
        chip, bounds, iters, _ = tested_data[cid]
        measured_upper = {e: b.upper for e, b in bounds.items()}
        full_bounds = {e: (b.lower, b.upper) for e, b in bounds.items()}
        if primary.predictor is not None:
            for pred in primary.predictor.predict(measured_upper):
                full_bounds[pred.edge_id] = (pred.lower, pred.upper)
        for label, period in periods:
            problem = ConfigProblem(designated_period=period,
                                    bounds=full_bounds, graph=graph,
                                    hold_floors=hold_floors)
            per_period_cfgs[label][cid] = configure_buffers(problem)
    config_seconds = time.perf_counter() - config_start

    for label, period in periods:
        report = evaluate_yield(chips_list, per_period_cfgs[label], graph,
                                model, period, hold_floors)
        period_yields.append(PeriodYield(
            label=label, period=period,
            yield_ideal=report.yield_ideal,
            yield_tested=report.yield_tested,
            yield_no_buffer=report.yield_no_buffer))
        for cid, verdict in zip(chip_ids, report.verdicts):
            chip_rows.append(ChipRow(
                chip_id=cid, period_label=label, feasible=verdict.feasible,
                setup_pass=verdict.setup_pass, hold_pass=verdict.hold_pass,
                slack_gap=verdict.slack_gap,
                iterations=tested_data[cid][2]))

    # Ablation statistics over a shared chip prefix for every mode; the
    # primary mode additionally reports full-run numbers in the metrics row.
    mode_stats: list[ModeStats] = []
    ab_ids = chip_ids[:min(cfg.chips, cfg.ablation_chips)]
    for mode in cfg.modes:
        plan = plans[mode]
        if mode == cfg.modes[0]:
            iters = [tested_data[cid][2] for cid in (ab_ids or chip_ids)]
        elif not ab_ids:
            continue
        else:
            data, _ = _run_mode(plan, graph, model, tester_cfg, hold_floors,
                                ab_ids, cfg.seeds.chips, False, cfg.workers)
            iters = [data[cid][2] for cid in ab_ids]
        mean_iters = float(np.mean(iters))
        mode_stats.append(ModeStats(
            mode=mode, mean_iterations=mean_iters,
            iterations_per_path=mean_iters / len(plan.tested),
            paths_measured=len(plan.tested)))

    iters_mean = float(np.mean([tested_data[cid][2] for cid in chip_ids]))
    n_tested = len(primary.tested)
    per_tested = iters_mean / n_tested
    per_path = pathwise_total / len(edge_ids)
    red_total, red_per = MetricsTable.reductions(iters_mean, pathwise_total,
                                                 per_tested, per_path)
    n_gates = len(graph.flip_flops) * 13 + 3 * len(edge_ids)  # metadata only
    metrics = MetricsTable(
        name=cfg.name,
        n_flip_flops=len(graph.flip_flops),
        n_gates=n_gates,
        n_buffers=len(graph.buffered_nodes()),
        n_paths=len(edge_ids),
        n_tested=n_tested,
        iters_mean=iters_mean,
        iters_per_tested=per_tested,
        pathwise_iters=float(pathwise_total),
        pathwise_per_path=per_path,
        reduction_total_pct=red_total,
        reduction_per_path_pct=red_per,
        prep_seconds=prep_seconds,
        test_seconds=test_seconds / max(1, cfg.chips),
        config_seconds=config_seconds / max(1, cfg.chips))

    manifest = {
        "tool_version": __version__,
        "benchmark": bench_source,
        "experiment": _config_to_dict(cfg),
    }
    return ExperimentResult(config=cfg, metrics=metrics,
                            period_yields=period_yields,
                            mode_stats=mode_stats, chip_rows=chip_rows,
                            iteration_log=iteration_log, manifest=manifest)


def _run_mode(plan: _Plan, graph, model, tester_cfg, hold_floors, chip_ids,
              chip_seed, collect_log, workers):
    if workers <= 1 or len(chip_ids) < 4 * workers:
        return _test_chips(plan, graph, model, tester_cfg, hold_floors,
                           chip_ids, chip_seed, collect_log)
    chunks = np.array_split(np.asarray(chip_ids), workers)
    args = [(plan, graph, model, tester_cfg, hold_floors,
             [int(c) for c in chunk], chip_seed, collect_log)
            for chunk in chunks if len(chunk)]
    merged: dict = {}
    elapsed = 0.0
    try:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for data, dt in pool.map(_worker_test, args):
                merged.update(data)
                elapsed += dt
    except (OSError, RuntimeError):
        return _test_chips(plan, graph, model, tester_cfg, hold_floors,
                           chip_ids, chip_seed, collect_log)
    return merged, elapsed


# ---------------------------------------------------------------------------
# Config (de)serialization and report emission


def _config_to_dict(cfg: ExperimentConfig) -> dict:
    doc = {
        "chips": cfg.chips,
        "periods": [{"label": p.label, "quantile": p.quantile}
                    for p in cfg.periods],
        "modes": list(cfg.modes),
        "resolution": cfg.resolution,
        "resolution_power": cfg.resolution_power,
        "hold_samples": cfg.hold_samples,
        "hold_target": cfg.hold_target,
        "sigma_scale": cfg.sigma_scale,
        "seeds": asdict(cfg.seeds),
        "workers": cfg.workers,
        "iteration_log": cfg.iteration_log,
        "ablation_chips": cfg.ablation_chips,
        "name": cfg.name,
    }
    if cfg.benchmark_file is not None:
        doc["benchmark"] = {"file": str(cfg.benchmark_file)}
    else:
        doc["benchmark"] = {"generator": asdict(cfg.generator)}
    return doc


def config_from_dict(doc: dict) -> ExperimentConfig:
    bench = doc.get("benchmark") or {}
    generator = None
    benchmark_file = bench.get("file")
    if "generator" in bench:
        raw = dict(bench["generator"])
        raw["mean_delay_range"] = tuple(raw["mean_delay_range"])
        if "hold_margin_frac" in raw:
            raw["hold_margin_frac"] = tuple(raw["hold_margin_frac"])
        generator = GeneratorConfig(**raw)
    periods = [PeriodSpec(p["label"], float(p["quantile"]))
               for p in doc.get("periods", [{"label": "T1", "quantile": 0.5},
                                            {"label": "T2", "quantile": 0.8413}])]
    seeds = Seeds(**doc.get("seeds", {}))
    return ExperimentConfig(
        benchmark_file=benchmark_file,
        generator=generator,
        chips=int(doc.get("chips", 1000)),
        periods=periods,
        modes=list(doc.get("modes", ["effitest"])),
        resolution=doc.get("resolution"),
        resolution_power=int(doc.get("resolution_power", 8)),
        hold_samples=int(doc.get("hold_samples", 1000)),
        hold_target=float(doc.get("hold_target", 0.99)),
        sigma_scale=float(doc.get("sigma_scale", 1.0)),
        seeds=seeds,
        workers=int(doc.get("workers", 1)),
        iteration_log=bool(doc.get("iteration_log", False)),
        ablation_chips=int(doc.get("ablation_chips", 200)),
        name=str(doc.get("name", "benchmark")))


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


_METRICS_COLUMNS = [
    "name", "n_flip_flops", "n_gates", "n_buffers", "n_paths", "n_tested",
    "iters_mean", "iters_per_tested", "pathwise_iters", "pathwise_per_path",
    "reduction_total_pct", "reduction_per_path_pct"]

_RUNTIME_COLUMNS = ["name", "prep_seconds", "test_seconds", "config_seconds"]


def result_to_dict(result: ExperimentResult) -> dict:
    """Everything the report files need, minus the bulky iteration log."""
    m = result.metrics
    return {
        "metrics": {c: getattr(m, c) for c in _METRICS_COLUMNS},
        "runtimes": {c: getattr(m, c) for c in _RUNTIME_COLUMNS[1:]},
        "yields": [{
            "label": py.label, "period": py.period,
            "yield_ideal": py.yield_ideal, "yield_tested": py.yield_tested,
            "yield_drop": py.yield_drop,
            "yield_no_buffer": py.yield_no_buffer}
            for py in result.period_yields],
        "ablation": [asdict(ms) for ms in result.mode_stats],
        "chips": [asdict(row) for row in result.chip_rows],
        "manifest": result.manifest,
    }


def emit_reports(result: ExperimentResult | dict,
                 outdir: str | Path) -> dict[str, Path]:
    """Write every report file; returns name -> path.

    Wall-clock runtimes go to their own file so the remaining CSVs are
    byte-identical across replays of the same manifest.
    """
    doc = result_to_dict(result) if isinstance(result, ExperimentResult) \
        else result
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    m = doc["metrics"]
    lines = [",".join(_METRICS_COLUMNS),
             ",".join(str(m[c]) for c in _METRICS_COLUMNS)]
    paths["metrics"] = _write(out / "metrics.csv", lines)

    lines = [",".join(["label", "period", "yield_ideal_pct",
                       "yield_tested_pct", "yield_drop_pct",
                       "yield_no_buffer_pct"])]
    for py in doc["yields"]:
        lines.append(",".join([
            py["label"], str(py["period"]),
            str(100.0 * py["yield_ideal"]), str(100.0 * py["yield_tested"]),
            str(100.0 * py["yield_drop"]),
            str(100.0 * py["yield_no_buffer"])]))
    paths["yields"] = _write(out / "yields.csv", lines)

    lines = [",".join(["mode", "paths_measured", "mean_iterations",
                       "iterations_per_path"])]
    for ms in doc["ablation"]:
        lines.append(",".join([ms["mode"], str(ms["paths_measured"]),
                               str(ms["mean_iterations"]),
                               str(ms["iterations_per_path"])]))
    paths["ablation"] = _write(out / "ablation.csv", lines)

    lines = [",".join(["chip_id", "period", "feasible", "setup_pass",
                       "hold_pass", "slack_gap", "iterations"])]
    for row in doc["chips"]:
        lines.append(",".join([
            str(row["chip_id"]), row["period_label"],
            str(int(row["feasible"])), str(int(row["setup_pass"])),
            str(int(row["hold_pass"])),
            "" if row["slack_gap"] is None else str(row["slack_gap"]),
            str(row["iterations"])]))
    paths["chips"] = _write(out / "chips.csv", lines)

    lines = [",".join(_RUNTIME_COLUMNS),
             ",".join([str(m["name"])] + [str(doc["runtimes"][c])
                                          for c in _RUNTIME_COLUMNS[1:]])]
    paths["runtimes"] = _write(out / "runtimes.csv", lines)

    if isinstance(result, ExperimentResult) and result.iteration_log:
        with (out / "iterations.jsonl").open("w") as fh:
            for rec in result.iteration_log:
                fh.write(json.dumps({
                    "chip": rec.chip_id, "batch": rec.batch_index,
                    "iteration": rec.iteration, "period": rec.period,
                    "steps": rec.steps, "passed": rec.passed,
                    "bounds": rec.bounds, "clamped": rec.clamped,
                    "boundary": rec.boundary}, sort_keys=True) + "\n")
        paths["iterations"] = out / "iterations.jsonl"

    summary = {"metrics": doc["metrics"], "yields": doc["yields"],
               "ablation": doc["ablation"]}
    paths["summary"] = _write_json(out / "summary.json", summary)
    paths["manifest"] = _write_json(out / "manifest.json", doc["manifest"])
    paths["results"] = _write_json(out / "results.json", doc)
    return paths


def _write(path: Path, lines: list[str]) -> Path:
    path.write_text("\n".join(lines) + "\n")
    return path


def _write_json(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path
