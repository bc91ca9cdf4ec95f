"""Command-line entry point.

Commands: diagnose (attribution reports), evaluate (dataset metrics,
optionally under an ablation variant), analyze (signal-routing and
attention-validity studies), signals-dump (per-pass debugging document),
export (canonical trace serialization).

Exit codes are a stable contract: 0 success, 2 input error, 3 backend
error, 4 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import prism
from prism.backends import (
    BackendUnavailableError,
    ContextOverflowError,
    HttpBackend,
    SurrogateBackend,
    load_scripted,
)
from prism.engine import (
    VARIANTS,
    identify_symptoms,
    run_pipeline,
    select_candidates,
)
from prism.harness import (
    attention_validity_study,
    nll_routing_study,
    run_ablation,
)
from prism.ingest import (
    IngestError,
    parse_openinference,
    parse_whowhen,
    trace_from_document,
    trace_to_document,
)
from prism.model import DiagnosisConfig
from prism.prompts import BudgetPlan, build_diagnosis_prompt, build_filtering_prompt

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_BACKEND = 3
EXIT_CONFIG = 4

BACKEND_URL_ENV = "PRISM_BACKEND_URL"


class CliError(Exception):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_INPUT) from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot parse {path}: {exc}", EXIT_INPUT) from exc


def _trace_files(paths: list[str]) -> list[Path]:
    files: list[Path] = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            files.extend(
                sorted(
                    p
                    for p in path.glob("*.json")
                    if not p.name.endswith(".gt.json")
                )
            )
        elif path.exists():
            files.append(path)
        else:
            raise CliError(f"input path {path} does not exist", EXIT_INPUT)
    if not files:
        raise CliError("no trace documents found", EXIT_INPUT)
    return files


def _load_trace(path: Path, fmt: str):
    document = _read_json(path)
    trace_id = path.stem
    try:
        if fmt == "whowhen":
            return parse_whowhen(document, trace_id=trace_id)
        if fmt == "openinference":
            sidecar = path.with_name(path.stem + ".gt.json")
            annotations = _read_json(sidecar) if sidecar.exists() else None
            return parse_openinference(document, annotations, trace_id=trace_id)
        if fmt == "canonical":
            return trace_from_document(document)
    except IngestError as exc:
        raise CliError(f"{path}: {exc}", EXIT_INPUT) from exc
    raise CliError(f"unknown format {fmt!r}", EXIT_CONFIG)


def _build_backend(args):
    if args.backend == "surrogate":
        return SurrogateBackend()
    if args.backend == "scripted":
        if not args.fixture:
            raise CliError("scripted backend requires --fixture", EXIT_CONFIG)
        try:
            return load_scripted(args.fixture)
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot load fixture {args.fixture}: {exc}", EXIT_INPUT) from exc
    if args.backend == "http":
        url = args.backend_url or os.environ.get(BACKEND_URL_ENV)
        if not url:
            raise CliError(
                f"http backend requires --backend-url or {BACKEND_URL_ENV}", EXIT_CONFIG
            )
        return HttpBackend(url)
    raise CliError(f"unknown backend {args.backend!r}", EXIT_CONFIG)


def _build_config(args) -> DiagnosisConfig:
    overrides = {}
    if args.symptom_ratio is not None:
        overrides["symptom_ratio"] = args.symptom_ratio
    if args.k is not None:
        overrides["candidate_k"] = args.k
    if args.consensus_lambda is not None:
        overrides["consensus_lambda"] = args.consensus_lambda
    if args.budget is not None:
        overrides["filtering_budget_mode"] = "fixed"
        overrides["filtering_budget_tokens"] = args.budget
    if args.compressed_prefix is not None:
        overrides["compressed_prefix_tokens"] = args.compressed_prefix
    if args.layer_fraction is not None:
        overrides["layer_fraction"] = args.layer_fraction
    if args.keywords is not None:
        overrides["failure_keywords"] = tuple(
            k.strip() for k in args.keywords.split(",") if k.strip()
        )
    if args.max_submissions is not None:
        overrides["max_submissions"] = args.max_submissions
    try:
        if args.preset:
            return DiagnosisConfig.preset(args.preset, **overrides)
        return DiagnosisConfig(**overrides)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc


def _write_document(document: dict, out: str | None) -> None:
    payload = json.dumps(document, indent=2, ensure_ascii=False) + "\n"
    if out:
        Path(out).write_text(payload, encoding="utf-8")
    else:
        sys.stdout.write(payload)


def _document_header(args, config: DiagnosisConfig, backend) -> dict:
    echo = config.to_echo()
    echo["backend"] = backend.name if backend is not None else None
    return {
        "tool": "prism",
        "version": prism.__version__,
        "config_echo": echo,
    }


def cmd_diagnose(args) -> int:
    backend = _build_backend(args)
    config = _build_config(args)
    files = _trace_files(args.inputs)
    traces = [_load_trace(path, args.format) for path in files]

    def one(trace):
        try:
            return run_pipeline(trace, config, backend, args.variant), None
        except (ContextOverflowError, ValueError) as exc:
            return None, f"{trace.trace_id}: {exc}"

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(one, traces))
    else:
        outcomes = [one(trace) for trace in traces]

    document = _document_header(args, config, backend)
    document["config_echo"]["variant"] = args.variant
    document["reports"] = [
        report.to_document() for report, _ in outcomes if report is not None
    ]
    errors = [message for _, message in outcomes if message is not None]
    _write_document(document, args.out)
    for message in errors:
        print(f"error: {message}", file=sys.stderr)
    return EXIT_OK if not errors else EXIT_INPUT


def cmd_evaluate(args) -> int:
    backend = _build_backend(args)
    config = _build_config(args)
    files = _trace_files(args.inputs)
    traces = [_load_trace(path, args.format) for path in files]
    annotated = [t for t in traces if t.annotations is not None]
    if not annotated:
        raise CliError("dataset contains no annotated traces", EXIT_INPUT)

    result = run_ablation(annotated, backend, config, args.variant)
    document = _document_header(args, config, backend)
    document["config_echo"]["variant"] = args.variant
    document["seed"] = args.seed
    document["metric"] = result.to_document()
    _write_document(document, args.out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    backend = _build_backend(args)
    config = _build_config(args)
    files = _trace_files(args.inputs)
    traces = [_load_trace(path, args.format) for path in files]

    document = _document_header(args, config, backend)
    document["seed"] = args.seed
    if args.study == "routing":
        nll_metric, routed_metric = nll_routing_study(traces, backend, config)
        document["study"] = "routing"
        document["metrics"] = [nll_metric.to_document(), routed_metric.to_document()]
    else:
        results = attention_validity_study(traces, backend, config, rng_seed=args.seed)
        document["study"] = "validity"
        document["comparisons"] = [r.to_document() for r in results]
        if args.ecdf_out and results:
            lines = ["normalized_rank\tcumulative_fraction"]
            lines += [f"{x}\t{y}" for x, y in results[0].ecdf_points]
            Path(args.ecdf_out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_document(document, args.out)
    return EXIT_OK


def cmd_signals_dump(args) -> int:
    backend = _build_backend(args)
    config = _build_config(args)
    files = _trace_files(args.inputs)
    if len(files) != 1:
        raise CliError("signals-dump expects exactly one trace input", EXIT_INPUT)
    trace = _load_trace(files[0], args.format)

    plan1 = build_filtering_prompt(trace, BudgetPlan.from_config(config), backend)
    signals1 = backend.prefill(plan1, config.layer_fraction)
    symptoms1 = identify_symptoms(
        signals1.step_nll, plan1.step_texts(), config.symptom_ratio, config.failure_keywords
    )
    candidates = select_candidates(signals1.step_attention, symptoms1, config.candidate_k)
    plan2 = build_diagnosis_prompt(
        trace, symptoms1.members, candidates.members, config, backend
    )
    signals2 = backend.prefill(plan2, config.layer_fraction)
    symptoms2 = identify_symptoms(
        signals2.step_nll, plan2.step_texts(), config.symptom_ratio, config.failure_keywords
    )

    document = _document_header(args, config, backend)
    document["trace_id"] = trace.trace_id
    document["pass1"] = {
        "plan": plan1.to_document(),
        "signals": signals1.to_document(),
        "symptoms": symptoms1.to_document(),
        "candidates": candidates.to_document(),
    }
    document["pass2"] = {
        "plan": plan2.to_document(),
        "signals": signals2.to_document(),
        "symptoms": symptoms2.to_document(),
    }
    _write_document(document, args.out)
    return EXIT_OK


def cmd_export(args) -> int:
    files = _trace_files(args.inputs)
    traces = [_load_trace(path, args.format) for path in files]
    config = _build_config(args)
    stamp = _document_header(args, config, backend=None)

    def stamped(trace) -> dict:
        document = dict(stamp)
        document.update(trace_to_document(trace))
        return document

    documents = [stamped(trace) for trace in traces]
    _write_document(
        documents[0] if len(documents) == 1 else {"traces": documents}, args.out
    )
    return EXIT_OK


def _add_common_flags(parser: argparse.ArgumentParser, with_variant: bool = False) -> None:
    parser.add_argument("inputs", nargs="+", help="trace files or dataset directories")
    parser.add_argument(
        "--format",
        choices=("whowhen", "openinference", "canonical"),
        default="whowhen",
    )
    parser.add_argument(
        "--backend", choices=("surrogate", "scripted", "http"), default="surrogate"
    )
    parser.add_argument("--backend-url", help=f"http backend URL (or {BACKEND_URL_ENV})")
    parser.add_argument("--fixture", help="scripted backend fixture file")
    parser.add_argument("--preset", choices=("whowhen", "trail"))
    parser.add_argument("--symptom-ratio", type=float)
    parser.add_argument("--k", type=int, help="candidate set size")
    parser.add_argument("--lambda", dest="consensus_lambda", type=float)
    parser.add_argument("--budget", type=int, help="fixed per-step token budget")
    parser.add_argument("--compressed-prefix", type=int)
    parser.add_argument("--layer-fraction", type=float)
    parser.add_argument("--keywords", help="comma-separated failure keywords")
    parser.add_argument("--max-submissions", type=int)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--out", help="output file (default: stdout)")
    if with_variant:
        parser.add_argument("--variant", choices=VARIANTS, default="full")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prism",
        description="Failure attribution for multi-agent execution traces.",
    )
    parser.add_argument("--version", action="version", version=prism.__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    _add_common_flags(
        commands.add_parser("diagnose", help="rank failure-source candidates"),
        with_variant=True,
    )
    _add_common_flags(
        commands.add_parser("evaluate", help="compute dataset metrics"),
        with_variant=True,
    )
    analyze = commands.add_parser("analyze", help="signal studies")
    analyze.add_argument("--study", choices=("routing", "validity"), default="routing")
    analyze.add_argument("--ecdf-out", help="write the validity ECDF as a TSV table")
    _add_common_flags(analyze)
    _add_common_flags(commands.add_parser("signals-dump", help="dump per-pass signals"))
    _add_common_flags(commands.add_parser("export", help="canonical trace export"))
    return parser


HANDLERS = {
    "diagnose": cmd_diagnose,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "signals-dump": cmd_signals_dump,
    "export": cmd_export,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except BackendUnavailableError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except ContextOverflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
