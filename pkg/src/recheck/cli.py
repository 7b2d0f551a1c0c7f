"""Command-line entry point.

Exit status is 0 on success, 1 for usage, configuration or input errors,
and 2 for failures while running.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import random
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from .backend import BackendError, effective_parallelism
from .config import ConfigError, RunConfig
from .curate import CurationError, build_training_set, curate_problem, difficulty_filter
from .engine import (
    EngineError,
    Problem,
    load_problems,
    read_traces,
    run_probe,
    run_session,
    write_traces,
)
from .evalharness import (
    BenchmarkSpec,
    build_report,
    follow_format_rate,
    format_table,
    informativeness_rate,
    run_benchmark,
    score_trace,
    write_report,
)
from .textproto import segment_completion

logger = logging.getLogger("recheck")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="run seed (recorded in outputs)")
    p.add_argument("--max-in-flight", type=int, help="concurrent backend requests")
    p.add_argument("--backend", choices=("live", "scripted"), help="generation backend")
    p.add_argument("--fixture", help="JSONL fixture for the scripted backend")
    p.add_argument("--templates-dir", help="directory overriding bundled templates")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="recheck", description="Iterative self-critique inference, curation and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("infer", parents=[common], help="run the critique-refine loop over a problem file")
    p.add_argument("--problems", required=True)
    p.add_argument("--out", required=True, help="trace JSONL output")
    p.add_argument("--max-rounds", type=int)
    p.add_argument("--shuffle", action="store_true", help="shuffle problem order with the run seed")

    p = sub.add_parser("eval", parents=[common], help="benchmark with repeated samples and report metrics")
    p.add_argument("--problems", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--samples", type=int, default=4, help="samples per problem")
    p.add_argument("--max-rounds", type=int)
    p.add_argument("--name", default=None, help="benchmark name (defaults to the problem file stem)")

    p = sub.add_parser("probe", parents=[common], help="measure self-critique under the fixed probe")
    p.add_argument("--problems", required=True)
    p.add_argument("--out", help="probe result JSONL output")

    p = sub.add_parser("report", parents=[common], help="recompute metrics from stored traces")
    p.add_argument("--traces", required=True)
    p.add_argument("--problems", required=True, help="problem file with ground truth")
    p.add_argument("--out-dir")
    p.add_argument("--max-rounds", type=int, help="rounds to report (default: deepest round in traces)")
    p.add_argument("--name", default=None)

    p = sub.add_parser("curate", parents=[common], help="build the critique-refine training set")
    p.add_argument("--problems", required=True, help="candidate problem pool")
    p.add_argument("--direct", help="problems with annotated solutions used as direct-inference examples")
    p.add_argument("--out", required=True, help="training set JSONL output")
    p.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
    p.add_argument("--skip-filter", action="store_true", help="do not run the difficulty filter")
    p.add_argument("--round2", action="store_true", help="retry failed refinements with a second critique")
    p.add_argument("--k", type=int, help="samples per problem for the difficulty filter")
    p.add_argument("--min-incorrect", type=int)
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.max_in_flight is not None:
        cfg.max_in_flight = args.max_in_flight
    if args.backend is not None:
        cfg.backend.kind = args.backend
    if args.fixture is not None:
        cfg.backend.fixture = args.fixture
    if args.templates_dir is not None:
        cfg.templates_dir = args.templates_dir
    if getattr(args, "max_rounds", None) is not None:
        cfg.engine.max_rounds = args.max_rounds
    if getattr(args, "k", None) is not None:
        cfg.curation.k = args.k
    if getattr(args, "min_incorrect", None) is not None:
        cfg.curation.min_incorrect = args.min_incorrect
    if getattr(args, "round2", False):
        cfg.curation.round2 = True
    return cfg


def _load_pool(path: str, *, need_truth: bool) -> list[Problem]:
    if not Path(path).exists():
        raise UsageError(f"problem file {path} does not exist")
    try:
        problems = load_problems(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if not problems:
        raise UsageError(f"empty pool: {path} has no problems")
    if need_truth:
        missing = [p.id for p in problems if not p.ground_truth]
        if missing:
            raise UsageError(f"problems without ground truth: {', '.join(missing[:5])}")
    return problems


def _write_meta(path: Path, cfg: RunConfig, **extra) -> None:
    meta = {
        "seed": cfg.seed,
        "backend": cfg.backend.kind,
        "max_rounds": cfg.engine.max_rounds,
        "temperature": cfg.engine.temperature,
        "top_p": cfg.engine.top_p,
        "max_tokens": cfg.engine.max_tokens,
        "template_version": cfg.template_version,
        **extra,
    }
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_infer(args: argparse.Namespace, cfg: RunConfig) -> int:
    problems = _load_pool(args.problems, need_truth=False)
    cfg.validate(needs=("policy",))
    if args.shuffle:
        random.Random(cfg.seed).shuffle(problems)
    backend = cfg.make_backend()
    config = cfg.engine_config()
    workers = effective_parallelism(backend, cfg.max_in_flight)
    if workers == 1:
        traces = [run_session(p, config, backend) for p in problems]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(lambda p: run_session(p, config, backend), problems))
    out = Path(args.out)
    write_traces(out, traces)
    _write_meta(out.with_name(out.name + ".meta.json"), cfg, problems=len(problems))
    early = sum(t.stopped_early for t in traces)
    print(f"wrote {len(traces)} traces to {out} ({early} stopped early)")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    problems = _load_pool(args.problems, need_truth=True)
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    cfg.validate(needs=("policy",))
    backend = cfg.make_backend()
    spec = BenchmarkSpec(args.name or Path(args.problems).stem, problems, args.samples, cfg.engine_config())
    report, results = run_benchmark(spec, backend, cfg.max_in_flight, cfg.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_traces(out_dir / "traces.jsonl", [r.trace for r in results if r.trace is not None])
    write_report(report, out_dir)
    _write_meta(out_dir / "run.meta.json", cfg, samples=args.samples)
    print(format_table(report))
    return EXIT_OK


def cmd_probe(args: argparse.Namespace, cfg: RunConfig) -> int:
    problems = _load_pool(args.problems, need_truth=False)
    cfg.validate(needs=("policy",))
    backend = cfg.make_backend()
    config = cfg.engine_config()
    direct_only = dataclasses.replace(config, max_rounds=0)
    results = []
    for problem in problems:
        if problem.annotated:
            thought, summary = problem.annotated_thought or "", problem.annotated_summary or ""
        else:
            first = run_session(problem, direct_only, backend).rounds[0]
            thought, summary = first.thought, first.summary
        results.append(run_probe(problem, thought, summary, backend, config))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for r in results:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    print(f"probed: {len(results)}")
    print(f"follow-format rate: {follow_format_rate(results):.4f}")
    print(f"informativeness rate: {informativeness_rate(results):.4f}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, cfg: RunConfig) -> int:
    problems = _load_pool(args.problems, need_truth=True)
    try:
        traces = read_traces(args.traces)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read traces: {exc}") from exc
    if not traces:
        raise UsageError(f"{args.traces} holds no traces")
    by_id = {p.id: p for p in problems}
    unknown = sorted({t.problem_id for t in traces} - set(by_id))
    if unknown:
        raise UsageError(f"traces reference unknown problems: {', '.join(unknown[:5])}")
    max_rounds = args.max_rounds
    if max_rounds is None:
        max_rounds = max(len(t.rounds) for t in traces) - 1
    results = [score_trace(t, by_id[t.problem_id], max_rounds) for t in traces]
    seen = [p for p in problems if any(t.problem_id == p.id for t in traces)]
    samples = max(t.sample_index for t in traces) + 1
    report = build_report(args.name or Path(args.traces).stem, seen, results, max_rounds, samples)
    if args.out_dir:
        write_report(report, args.out_dir)
    print(format_table(report))
    return EXIT_OK


def _annotated_solution(p: Problem) -> tuple[Problem, str, str]:
    if p.annotated_thought:
        return p, p.annotated_thought, p.annotated_summary or ""
    seg = segment_completion(p.annotated_summary or "")
    return p, seg.thought, seg.summary


def cmd_curate(args: argparse.Namespace, cfg: RunConfig) -> int:
    pool = _load_pool(args.problems, need_truth=True)
    direct = _load_pool(args.direct, need_truth=False) if args.direct else []
    for p in direct:
        if not p.annotated:
            raise UsageError(f"direct example {p.id!r} lacks annotated_summary")
    cfg.validate(needs=("teacher", "critic", "refiner") + (() if args.skip_filter else ("filter",)))
    backend = cfg.make_backend()
    ccfg = cfg.curation_config()

    if not args.skip_filter:
        before = len(pool)
        pool = difficulty_filter(
            pool, backend, ccfg.k, ccfg.min_incorrect, 0.6,
            cfg.sampling("filter"), ccfg.templates, cfg.max_in_flight,
        )
        print(f"difficulty filter kept {len(pool)} of {before}")

    records, dropped = [], 0
    for problem in pool:
        produced = curate_problem(problem, backend, backend, backend, ccfg)
        if not produced:
            dropped += 1
        records.extend(produced)

    out = Path(args.out)
    manifest_path = Path(args.manifest) if args.manifest else out.with_name(out.name + ".manifest.json")
    manifest = build_training_set(
        [_annotated_solution(p) for p in direct],
        records, out, manifest_path, ccfg.templates, dropped,
    )
    print(f"direct: {manifest.direct_count}  critique: {manifest.critique_count}  total: {manifest.total}")
    for name, count in manifest.dispositions.items():
        print(f"  {name}: {count}")
    if dropped:
        print(f"  dropped: {dropped}")
    return EXIT_OK


COMMANDS = {
    "infer": cmd_infer,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "report": cmd_report,
    "curate": cmd_curate,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BackendError, EngineError, CurationError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
