"""Timing graph, tunable buffers, statistical delay model, chip sampling.

The circuit under test is reduced to its flip-flop-to-flip-flop view: nodes
are flip-flops (a small fraction carry a discrete clock-tuning buffer) and
directed edges are the combinational paths whose maximum delays must be
known to configure the buffers.  Path delays are jointly Gaussian; each edge
also carries a hold-margin variable (how much the buffer skew may lean
before the hold check at the sink fails).

A synthetic benchmark generator stands in for netlist-derived circuits:
edges cluster around the buffered flip-flops, which act as hubs, and the
covariance follows a two-level block model (strong within a cluster, weak
across clusters).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

SETUP = "setup"
HOLD = "hold"


class TimingError(ValueError):
    """Malformed graph, model, or generator configuration."""


class FactorizationError(RuntimeError):
    """Covariance could not be factorized even after PSD repair."""


@dataclass
class TuningBuffer:
    """Discrete post-silicon delay buffer on a flip-flop clock path.

    The buffer value is always a grid point ``range_start + k * grid_step``;
    only the integer step mutates after construction, so grid membership is
    exact by construction.
    """

    range_start: float
    range_width: float
    step_count: int
    step: int = 0

    def __post_init__(self):
        if self.step_count < 2:
            raise TimingError("step_count must be at least 2")
        if self.range_width < 0:
            raise TimingError("range_width must be non-negative")
        if not 0 <= self.step < self.step_count:
            raise TimingError("step outside grid")

    @property
    def grid_step(self) -> float:
        return self.range_width / (self.step_count - 1)

    @property
    def value(self) -> float:
        return self.range_start + self.step * self.grid_step

    def grid(self) -> np.ndarray:
        return self.range_start + self.grid_step * np.arange(self.step_count)

    def set_step(self, step: int) -> None:
        if not 0 <= step < self.step_count:
            raise TimingError(f"step {step} outside grid [0, {self.step_count})")
        self.step = int(step)

    def nearest_step(self, value: float) -> int:
        """Grid index closest to ``value``; ties resolve to the lower index."""
        if self.grid_step == 0:
            return 0
        raw = (value - self.range_start) / self.grid_step
        lo = int(np.clip(math.floor(raw), 0, self.step_count - 1))
        hi = int(np.clip(lo + 1, 0, self.step_count - 1))
        grid = self.grid()
        if abs(grid[hi] - value) < abs(grid[lo] - value):
            return hi
        return lo


@dataclass
class FlipFlop:
    id: str
    buffer: TuningBuffer | None = None
    setup_time: float = 0.0
    hold_time: float = 0.0

    def __post_init__(self):
        if self.setup_time < 0 or self.hold_time < 0:
            raise TimingError(f"flip-flop {self.id}: negative setup/hold time")


@dataclass
class TimingEdge:
    """Directed max-delay path between two flip-flops.

    ``setup_var`` / ``hold_var`` index the edge's setup-delay and
    hold-margin variables inside the shared DelayModel.
    """

    id: str
    src: str
    dst: str
    setup_var: int
    hold_var: int


@dataclass
class TimingGraph:
    flip_flops: dict[str, FlipFlop]
    edges: dict[str, TimingEdge]
    designated_period: float
    exclusions: set[tuple[str, str]] = field(default_factory=set)

    def __post_init__(self):
        if self.designated_period <= 0:
            raise TimingError("designated_period must be positive")
        for e in self.edges.values():
            if e.src not in self.flip_flops or e.dst not in self.flip_flops:
                raise TimingError(f"edge {e.id} references unknown flip-flop")
        for pair in self.exclusions:
            a, b = pair
            if a not in self.edges or b not in self.edges:
                raise TimingError(f"exclusion {pair} references unknown edge")

    def buffered_nodes(self) -> list[str]:
        return sorted(n for n, ff in self.flip_flops.items() if ff.buffer)

    def buffer_value(self, node: str) -> float:
        ff = self.flip_flops[node]
        return ff.buffer.value if ff.buffer else 0.0

    def edge_ids(self) -> list[str]:
        return sorted(self.edges)

    def excluded(self, a: str, b: str) -> bool:
        key = (a, b) if a <= b else (b, a)
        return key in self.exclusions


@dataclass
class DelayModel:
    """Joint Gaussian over all setup-delay and hold-margin variables."""

    means: np.ndarray
    covariance: np.ndarray
    labels: list[tuple[str, str]]  # (edge id, "setup" | "hold")

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)
        n = self.means.shape[0]
        if self.covariance.shape != (n, n):
            raise TimingError("mean / covariance dimensions disagree")
        if len(self.labels) != n:
            raise TimingError("labels length disagrees with dimension")
        if not np.allclose(self.covariance, self.covariance.T,
                           atol=1e-9 * max(1.0, float(np.abs(self.covariance).max()))):
            raise TimingError("covariance not symmetric")
        diag = np.diag(self.covariance)
        if np.any(diag < -1e-12):
            raise TimingError("negative variance on the diagonal")
        tol = 1e-9 * max(1.0, float(diag.max(initial=0.0)))
        if n and float(np.linalg.eigvalsh(self.covariance).min()) < -tol:
            raise TimingError("covariance not positive semi-definite")
        self._index = {lab: i for i, lab in enumerate(self.labels)}
        self._factor: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.means.shape[0]

    def index_of(self, edge_id: str, kind: str = SETUP) -> int:
        return self._index[(edge_id, kind)]

    def indices(self, kind: str) -> np.ndarray:
        return np.array([i for i, (_, k) in enumerate(self.labels) if k == kind],
                        dtype=int)

    def sigma(self, idx: int) -> float:
        return float(np.sqrt(max(self.covariance[idx, idx], 0.0)))

    def sigmas(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def factor(self) -> np.ndarray:
        """Lower-triangular-like factor L with L L^T = covariance."""
        if self._factor is None:
            try:
                self._factor = np.linalg.cholesky(self.covariance)
            except np.linalg.LinAlgError:
                repaired = repair_psd(self.covariance)
                try:
                    vals, vecs = np.linalg.eigh(repaired)
                except np.linalg.LinAlgError as exc:
                    raise FactorizationError("covariance factorization failed") from exc
                vals = np.clip(vals, 0.0, None)
                self._factor = vecs * np.sqrt(vals)
            if not np.all(np.isfinite(self._factor)):
                raise FactorizationError("covariance factorization produced non-finite values")
        return self._factor


@dataclass
class ChipInstance:
    """One manufactured chip: a fixed draw of every model variable."""

    chip_id: int
    true_delays: np.ndarray

    def delay(self, model: DelayModel, edge_id: str, kind: str = SETUP) -> float:
        return float(self.true_delays[model.index_of(edge_id, kind)])


@dataclass
class GeneratorConfig:
    n_flip_flops: int
    buffer_fraction: float
    n_edges: int
    cluster_count: int
    intra_cluster_corr: float
    global_corr: float
    mean_delay_range: tuple[float, float]
    cv: float
    seed: int
    # Structural knobs with defaults; the hub imbalance is what makes
    # per-chip tuning worth anything (slack moves across a hub).
    stage_imbalance: float = 0.18
    mean_jitter: float = 0.06
    hold_margin_frac: tuple[float, float] = (0.25, 0.45)
    hold_cv_scale: float = 0.3
    buffer_step_count: int = 20
    hub_edge_frac: float = 0.85  # edges with exactly one buffered endpoint
    hub_hub_frac: float = 0.05   # edges between two buffered nodes

    def validate(self) -> None:
        if not 0 < self.buffer_fraction <= 1:
            raise TimingError("buffer_fraction must be in (0, 1]")
        if not 0 <= self.global_corr <= self.intra_cluster_corr <= 1:
            raise TimingError("need 0 <= global_corr <= intra_cluster_corr <= 1")
        if self.cv <= 0:
            raise TimingError("cv must be positive")
        if self.cluster_count < 1:
            raise TimingError("cluster_count must be at least 1")
        lo, hi = self.mean_delay_range
        if not 0 < lo <= hi:
            raise TimingError("mean_delay_range must satisfy 0 < low <= high")
        if self.n_flip_flops < 2:
            raise TimingError("need at least two flip-flops")
        if self.n_edges < 1:
            raise TimingError("need at least one edge")
        max_edges = self.n_flip_flops * (self.n_flip_flops - 1)
        if self.n_edges > max_edges:
            raise TimingError(
                f"{self.n_edges} edges cannot fit {self.n_flip_flops} nodes "
                f"without duplicates (max {max_edges})")


def repair_psd(matrix: np.ndarray) -> np.ndarray:
    """Nearest-PSD repair: eigenvalue clamping at zero, re-symmetrized."""
    sym = 0.5 * (matrix + matrix.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min(initial=0.0) >= 0.0:
        return sym
    clamped = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
    return 0.5 * (clamped + clamped.T)


def buffer_defaults(graph: TimingGraph, designated_period: float,
                    step_count: int = 20) -> TimingGraph:
    """Reset every buffer to the default sizing for the given clock period.

    Width is one eighth of the period, centered symmetrically about zero
    (buffer delays are relative to a reference edge, so negative values are
    meaningful); the value starts at the grid point nearest zero.
    """
    if designated_period <= 0:
        raise TimingError("designated_period must be positive")
    width = designated_period / 8.0
    start = -width / 2.0
    for ff in graph.flip_flops.values():
        if ff.buffer is None:
            continue
        buf = TuningBuffer(start, width, step_count)
        buf.set_step(buf.nearest_step(0.0))
        ff.buffer = buf
    return graph


def sample_chip(model: DelayModel, seed: int, chip_id: int) -> ChipInstance:
    """Draw one chip from N(mean, covariance); pure in (seed, chip_id)."""
    rng = np.random.default_rng([seed, chip_id])
    z = rng.standard_normal(model.dim)
    delays = model.means + model.factor() @ z
    return ChipInstance(chip_id=chip_id, true_delays=delays)


def _block_correlation(clusters: np.ndarray, intra: float, glob: float) -> np.ndarray:
    same = clusters[:, None] == clusters[None, :]
    rho = np.where(same, intra, glob)
    np.fill_diagonal(rho, 1.0)
    return rho


def generate_benchmark(cfg: GeneratorConfig) -> tuple[TimingGraph, DelayModel]:
    """Build a synthetic clustered benchmark and its joint delay model.

    Identical seeds produce bit-identical output.  Edges attach
    preferentially to buffered hub nodes so that paths form clusters around
    them; in-edges of a hub run slower than its out-edges on average, which
    is the imbalance the tuning buffers exploit.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_s, n_p = cfg.n_flip_flops, cfg.n_edges

    node_ids = [f"ff{i:04d}" for i in range(n_s)]
    n_buf = math.ceil(cfg.buffer_fraction * n_s)
    hub_ids = node_ids[:n_buf]
    node_cluster = {nid: i % cfg.cluster_count for i, nid in enumerate(node_ids)}

    # Connected web over the touched nodes (hubs first).  Paths converge at
    # or leave from the buffered hubs, so almost every edge has a hub
    # endpoint; the web stays connected because each new node first links
    # to an already-connected one.
    n_touched = min(n_s, n_p + 1)
    touched = node_ids[:n_touched]
    hub_pool = [nid for nid in hub_ids if nid in set(touched)]
    plain_pool = [nid for nid in touched if nid not in set(hub_ids)]

    edge_pairs: list[tuple[str, str]] = []
    seen: set[tuple[str, str]] = set()

    def add_pair(a: str, b: str) -> bool:
        if a == b or (a, b) in seen:
            return False
        seen.add((a, b))
        edge_pairs.append((a, b))
        return True

    for k in range(1, n_touched):
        new = touched[k]
        prev_hubs = hub_pool[:k]  # hubs sit at the front of the touched list
        if prev_hubs and rng.random() < 0.9:
            other = prev_hubs[int(rng.integers(len(prev_hubs)))]
        else:
            other = touched[int(rng.integers(k))]
        if rng.random() < 0.5:
            add_pair(other, new)
        else:
            add_pair(new, other)

    guard = 0
    while len(edge_pairs) < n_p:
        guard += 1
        if guard > 200 * n_p + 10_000:
            raise TimingError("could not place the requested edge count")
        draw = rng.random()
        if len(hub_pool) >= 2 and draw < cfg.hub_hub_frac:
            i, j = rng.choice(len(hub_pool), size=2, replace=False)
            a, b = hub_pool[int(i)], hub_pool[int(j)]
        elif hub_pool and plain_pool and draw < cfg.hub_hub_frac + cfg.hub_edge_frac:
            h = hub_pool[int(rng.integers(len(hub_pool)))]
            v = plain_pool[int(rng.integers(len(plain_pool)))]
            a, b = (h, v) if rng.random() < 0.5 else (v, h)
        else:
            pool = plain_pool if len(plain_pool) >= 2 else touched
            i, j = rng.choice(len(pool), size=2, replace=False)
            a, b = pool[int(i)], pool[int(j)]
        add_pair(a, b)

    hub_set = set(hub_ids)
    edge_ids = [f"p{i:04d}" for i in range(n_p)]

    # Cluster of an edge follows the hub it touches (sink hub wins).
    edge_cluster = np.empty(n_p, dtype=int)
    direction_factor = np.empty(n_p)
    for i, (src, dst) in enumerate(edge_pairs):
        if dst in hub_set:
            edge_cluster[i] = node_cluster[dst]
        elif src in hub_set:
            edge_cluster[i] = node_cluster[src]
        else:
            edge_cluster[i] = node_cluster[src]
        src_hub, dst_hub = src in hub_set, dst in hub_set
        if dst_hub and not src_hub:
            direction_factor[i] = 1.0 + cfg.stage_imbalance
        elif src_hub and not dst_hub:
            direction_factor[i] = 1.0 - cfg.stage_imbalance
        else:
            direction_factor[i] = 1.0

    lo, hi = cfg.mean_delay_range
    cluster_base = rng.uniform(lo, hi, size=cfg.cluster_count)
    jitter = 1.0 + cfg.mean_jitter * rng.uniform(-1.0, 1.0, size=n_p)
    setup_mean = cluster_base[edge_cluster] * direction_factor * jitter
    setup_sigma = cfg.cv * setup_mean

    rho = _block_correlation(edge_cluster, cfg.intra_cluster_corr, cfg.global_corr)
    cov_setup = np.outer(setup_sigma, setup_sigma) * rho

    h_lo, h_hi = cfg.hold_margin_frac
    hold_mean = -rng.uniform(h_lo, h_hi, size=n_p) * setup_mean
    hold_sigma = cfg.cv * setup_mean * cfg.hold_cv_scale
    cov_hold = np.outer(hold_sigma, hold_sigma) * rho

    dim = 2 * n_p
    cov = np.zeros((dim, dim))
    cov[:n_p, :n_p] = cov_setup
    cov[n_p:, n_p:] = cov_hold
    means = np.concatenate([setup_mean, hold_mean])

    tol = 1e-9 * max(1.0, float(np.diag(cov).max()))
    if float(np.linalg.eigvalsh(cov).min()) < -tol:
        cov = repair_psd(cov)

    labels = [(eid, SETUP) for eid in edge_ids] + [(eid, HOLD) for eid in edge_ids]
    model = DelayModel(means=means, covariance=cov, labels=labels)

    # Designated period: median of the no-buffer critical delay, estimated
    # from the model itself (quick Monte Carlo on the setup block).
    est_rng = np.random.default_rng([cfg.seed, 0xD1CE])
    factor_setup = np.linalg.cholesky(repair_psd(cov_setup) + 1e-12 * np.eye(n_p))
    draws = setup_mean[None, :] + est_rng.standard_normal((2001, n_p)) @ factor_setup.T
    designated = float(np.median(draws.max(axis=1)))

    flip_flops = {nid: FlipFlop(id=nid) for nid in node_ids}
    for nid in hub_ids:
        flip_flops[nid].buffer = TuningBuffer(0.0, 1.0, cfg.buffer_step_count)

    edges = {}
    for i, (eid, (src, dst)) in enumerate(zip(edge_ids, edge_pairs)):
        edges[eid] = TimingEdge(id=eid, src=src, dst=dst,
                                setup_var=i, hold_var=n_p + i)

    graph = TimingGraph(flip_flops=flip_flops, edges=edges,
                        designated_period=designated)
    buffer_defaults(graph, designated, cfg.buffer_step_count)
    return graph, model


# ---------------------------------------------------------------------------
# Benchmark serialization: one JSON document, lossless float round-trip.


def benchmark_to_dict(graph: TimingGraph, model: DelayModel,
                      config: GeneratorConfig | None = None) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "designated_period": graph.designated_period,
        "flip_flops": [
            {
                "id": ff.id,
                "setup_time": ff.setup_time,
                "hold_time": ff.hold_time,
                "buffer": None if ff.buffer is None else {
                    "range_start": ff.buffer.range_start,
                    "range_width": ff.buffer.range_width,
                    "step_count": ff.buffer.step_count,
                    "step": ff.buffer.step,
                },
            }
            for ff in (graph.flip_flops[k] for k in sorted(graph.flip_flops))
        ],
        "edges": [
            {"id": e.id, "src": e.src, "dst": e.dst,
             "setup_var": e.setup_var, "hold_var": e.hold_var}
            for e in (graph.edges[k] for k in sorted(graph.edges))
        ],
        "exclusions": sorted(list(p) for p in graph.exclusions),
        "delay_model": {
            "labels": [list(lab) for lab in model.labels],
            "means": model.means.tolist(),
            "covariance": model.covariance.tolist(),
        },
        "generator_config": None if config is None else asdict(config),
    }
    return doc


def benchmark_from_dict(doc: dict) -> tuple[TimingGraph, DelayModel,
                                            GeneratorConfig | None]:
    if doc.get("format_version") != FORMAT_VERSION:
        raise TimingError(f"unsupported benchmark format {doc.get('format_version')!r}")
    flip_flops = {}
    for rec in doc["flip_flops"]:
        buf = rec.get("buffer")
        buffer = None
        if buf is not None:
            buffer = TuningBuffer(buf["range_start"], buf["range_width"],
                                  buf["step_count"], buf["step"])
        flip_flops[rec["id"]] = FlipFlop(id=rec["id"], buffer=buffer,
                                         setup_time=rec["setup_time"],
                                         hold_time=rec["hold_time"])
    edges = {}
    for rec in doc["edges"]:
        edges[rec["id"]] = TimingEdge(id=rec["id"], src=rec["src"],
                                      dst=rec["dst"], setup_var=rec["setup_var"],
                                      hold_var=rec["hold_var"])
    exclusions = {tuple(sorted(p)) for p in doc.get("exclusions", [])}
    graph = TimingGraph(flip_flops=flip_flops, edges=edges,
                        designated_period=doc["designated_period"],
                        exclusions=exclusions)
    dm = doc["delay_model"]
    model = DelayModel(means=np.array(dm["means"], dtype=float),
                       covariance=np.array(dm["covariance"], dtype=float),
                       labels=[tuple(lab) for lab in dm["labels"]])
    cfg = None
    raw = doc.get("generator_config")
    if raw is not None:
        raw = dict(raw)
        raw["mean_delay_range"] = tuple(raw["mean_delay_range"])
        raw["hold_margin_frac"] = tuple(raw["hold_margin_frac"])
        cfg = GeneratorConfig(**raw)
    return graph, model, cfg


def save_benchmark(path: str | Path, graph: TimingGraph, model: DelayModel,
                   config: GeneratorConfig | None = None) -> None:
    doc = benchmark_to_dict(graph, model, config)
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_benchmark(path: str | Path) -> tuple[TimingGraph, DelayModel,
                                              GeneratorConfig | None]:
    return benchmark_from_dict(json.loads(Path(path).read_text()))
