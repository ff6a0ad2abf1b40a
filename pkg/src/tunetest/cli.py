"""Command-line entry points.

Verbs:
  generate  build a synthetic benchmark file from generator settings
  run       execute an experiment described by a JSON config file
  replay    re-run an experiment from a saved manifest (bit-identical)
  report    re-emit the report files from a saved results.json
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiment import (ExperimentError, config_from_dict, emit_reports,
                         load_experiment_config, run_experiment)
from .timing import GeneratorConfig, generate_benchmark, save_benchmark


def _add_generate(sub):
    p = sub.add_parser("generate", help="write a synthetic benchmark file")
    p.add_argument("--out", required=True, help="output benchmark JSON path")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--flip-flops", type=int, default=500)
    p.add_argument("--edges", type=int, default=320)
    p.add_argument("--buffer-fraction", type=float, default=0.01)
    p.add_argument("--clusters", type=int, default=5)
    p.add_argument("--intra-corr", type=float, default=0.97)
    p.add_argument("--global-corr", type=float, default=0.25)
    p.add_argument("--mean-low", type=float, default=4.0)
    p.add_argument("--mean-high", type=float, default=8.0)
    p.add_argument("--cv", type=float, default=0.10)
    p.add_argument("--steps", type=int, default=20,
                   help="buffer grid levels")


def _add_run(sub):
    p = sub.add_parser("run", help="run an experiment from a config file")
    p.add_argument("--config", required=True, help="experiment JSON config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--chips", type=int, default=None,
                   help="override chip count")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--iteration-log", action="store_true",
                   help="also write iterations.jsonl")


def _add_replay(sub):
    p = sub.add_parser("replay", help="re-run an experiment from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)


def _add_report(sub):
    p = sub.add_parser("report", help="re-emit reports from results.json")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="tunetest",
        description="Post-silicon clock-tuning delay-test simulator")
    sub = parser.add_subparsers(dest="verb", required=True)
    _add_generate(sub)
    _add_run(sub)
    _add_replay(sub)
    _add_report(sub)
    args = parser.parse_args(argv)

    try:
        if args.verb == "generate":
            cfg = GeneratorConfig(
                n_flip_flops=args.flip_flops,
                buffer_fraction=args.buffer_fraction,
                n_edges=args.edges,
                cluster_count=args.clusters,
                intra_cluster_corr=args.intra_corr,
                global_corr=args.global_corr,
                mean_delay_range=(args.mean_low, args.mean_high),
                cv=args.cv,
                seed=args.seed,
                buffer_step_count=args.steps)
            graph, model = generate_benchmark(cfg)
            save_benchmark(args.out, graph, model, cfg)
            print(f"wrote {args.out}: {len(graph.flip_flops)} flip-flops, "
                  f"{len(graph.buffered_nodes())} buffers, "
                  f"{len(graph.edges)} paths, "
                  f"period {graph.designated_period:.4f}")
            return 0

        if args.verb == "run":
            cfg = load_experiment_config(args.config)
            if args.chips is not None:
                cfg.chips = args.chips
            if args.workers is not None:
                cfg.workers = args.workers
            if args.iteration_log:
                cfg.iteration_log = True
            result = run_experiment(cfg)
            paths = emit_reports(result, args.out)
            _print_run_summary(result)
            print(f"reports in {Path(args.out).resolve()}")
            return 0

        if args.verb == "replay":
            manifest = json.loads(Path(args.manifest).read_text())
            cfg = config_from_dict(manifest["experiment"])
            result = run_experiment(cfg)
            emit_reports(result, args.out)
            print(f"replayed into {Path(args.out).resolve()}")
            return 0

        if args.verb == "report":
            doc = json.loads(Path(args.results).read_text())
            emit_reports(doc, args.out)
            print(f"re-emitted reports into {Path(args.out).resolve()}")
            return 0
    except (ExperimentError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


def _print_run_summary(result) -> None:
    m = result.metrics
    print(f"{m.name}: paths={m.n_paths} tested={m.n_tested} "
          f"iters/chip={m.iters_mean:.2f} pathwise={m.pathwise_iters:.0f} "
          f"reduction={m.reduction_total_pct:.2f}%")
    for py in result.period_yields:
        print(f"  {py.label} (T={py.period:.4f}): "
              f"ideal={100 * py.yield_ideal:.2f}% "
              f"tested={100 * py.yield_tested:.2f}% "
              f"drop={100 * py.yield_drop:.2f}pt "
              f"no-buffer={100 * py.yield_no_buffer:.2f}%")


if __name__ == "__main__":
    sys.exit(main())
