"""Command-line entry point.

Subcommands cover the whole pipeline: generate candidate pairs, serve the
review queue, assemble the reviewed dataset, evaluate a detector backend,
benchmark its latency, and scan files. Machine-readable JSON artifacts are
always written before the human summary is printed.

Exit codes: 0 success, 1 domain signal (scan found vulnerable code, generate
left a CWE empty), 2 operational error. For eval the exit code reflects
whether the run completed, never how good the metrics are.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import backend as backend_mod
from . import bench as bench_mod
from . import evaluation
from .catalog import load_catalog, parse_cwe_id
from .config import ToolConfig, resolve_api_key, resolve_config, resolve_instruction
from .dataset import split_dataset, write_instances_jsonl, read_instances_jsonl
from .errors import CwekitError
from .generation import (
    DEFAULT_TEMPLATE,
    FixtureBackend,
    GenerationError,
    HttpGenerationBackend,
    generate_for_cwe,
)
from .review import ReviewQueue, create_app

_BENCH_SNIPPET = (
    "import sqlite3\n"
    "\n"
    "def find_user(conn, name):\n"
    "    cursor = conn.cursor()\n"
    "    cursor.execute(\"SELECT id FROM users WHERE name = '%s'\" % name)\n"
    "    return cursor.fetchone()\n"
)


def _write_json(path: str | Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n",
                    encoding="utf-8")


def _make_model_backend(config: ToolConfig) -> backend_mod.Backend:
    return backend_mod.make_backend(
        config.backend_url,
        adapter=config.backend_adapter,
        timeout=config.timeout_seconds,
        api_key=resolve_api_key(config, os.environ),
    )


# ---------------------------------------------------------------------------
# generate


def cmd_generate(config: ToolConfig, args: argparse.Namespace) -> int:
    catalog = load_catalog(config.catalog_path or None)
    by_number = {entry.id.number: entry for entry in catalog}
    if args.cwe:
        entries = []
        for text in args.cwe:
            cwe = parse_cwe_id(text)
            if cwe.number not in by_number:
                raise GenerationError(f"{cwe} is not in the catalog")
            entries.append(by_number[cwe.number])
    else:
        entries = catalog

    if config.generation_backend == "fixture":
        if not config.fixture_dir:
            raise GenerationError("generation_backend=fixture needs fixture_dir")
        teacher = FixtureBackend(config.fixture_dir)
    elif config.generation_backend == "http":
        teacher = HttpGenerationBackend(
            config.generation_url or config.backend_url,
            adapter=config.backend_adapter,
            temperature=config.generation_temperature,
            max_new_tokens=config.generation_max_new_tokens,
            timeout=config.timeout_seconds,
            api_key=resolve_api_key(config, os.environ),
        )
    else:
        raise GenerationError(
            f"unknown generation_backend {config.generation_backend!r} (http or fixture)")

    queue = ReviewQueue(config.review_dir)
    rows = []
    failed = []
    for entry in entries:
        try:
            batch = generate_for_cwe(
                teacher, entry, config.pairs_per_cwe, queue,
                template=DEFAULT_TEMPLATE, max_retries=config.generation_max_retries)
            rows.append({
                "cwe": entry.id.canonical,
                "requested": batch.requested,
                "kept": len(batch.candidates),
                "rejected": len(batch.rejections),
                "attempts": batch.attempts,
                "complete": batch.complete,
            })
        except GenerationError as exc:
            failed.append(entry.id.canonical)
            rows.append({"cwe": entry.id.canonical, "requested": config.pairs_per_cwe,
                         "kept": 0, "error": str(exc)})

    report_path = args.report or str(Path(config.review_dir) / "generation_report.json")
    _write_json(report_path, {
        "schema_version": 1,
        "backend": teacher.id,
        "template_version": DEFAULT_TEMPLATE.version,
        "pairs_per_cwe": config.pairs_per_cwe,
        "per_cwe": rows,
    })

    for row in rows:
        if "error" in row:
            print(f"{row['cwe']}: FAILED: {row['error']}")
        else:
            mark = "" if row["complete"] else "  (incomplete)"
            print(f"{row['cwe']}: kept {row['kept']}/{row['requested']}, "
                  f"rejected {row['rejected']}, attempts {row['attempts']}{mark}")
    print(f"report: {report_path}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# review-serve


def cmd_review_serve(config: ToolConfig, args: argparse.Namespace) -> int:
    import uvicorn

    queue = ReviewQueue(config.review_dir)
    for note in queue.repairs:
        print(f"store repair: {note}", file=sys.stderr)
    app = create_app(queue, config.ui_dir or None)
    host, _, port = args.bind.rpartition(":")
    if not host or not port.isdigit():
        raise CwekitError(f"--bind must look like host:port, got {args.bind!r}")
    print(f"serving review queue from {config.review_dir} on http://{host}:{port}")
    uvicorn.run(app, host=host, port=int(port), log_level="warning")
    return 0


# ---------------------------------------------------------------------------
# assemble


def cmd_assemble(config: ToolConfig, args: argparse.Namespace) -> int:
    from .dataset import expand_pair

    catalog = load_catalog(config.catalog_path or None)
    queue = ReviewQueue(config.review_dir)
    instruction = resolve_instruction(config)

    items = queue.accepted_items(catalog)
    if not items:
        progress = queue.progress()["totals"]
        raise CwekitError(
            "no accepted pairs to assemble; review progress: "
            + ", ".join(f"{state}={count}" for state, count in progress.items()))

    instances = []
    strata = []
    for item in items:
        vulnerable, secure = expand_pair(item.pair, instruction)
        canonical = item.pair.cwe.canonical
        instances += [vulnerable, secure]
        strata += [(canonical, "vulnerable"), (canonical, "secure")]

    split = split_dataset(instances, config.test_size, config.seed, strata)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_path = out_dir / "train.jsonl"
    test_path = out_dir / "test.jsonl"
    write_instances_jsonl(split.train, train_path)
    write_instances_jsonl(split.test, test_path)
    manifest = dict(split.manifest)
    manifest["instruction_digest"] = evaluation.instruction_digest(instruction)
    manifest["review_dir"] = str(config.review_dir)
    _write_json(out_dir / "manifest.json", manifest)

    print(f"train: {len(split.train)} instances -> {train_path}")
    print(f"test:  {len(split.test)} instances -> {test_path}")
    print(f"manifest: {out_dir / 'manifest.json'} (seed {split.seed})")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(config: ToolConfig, args: argparse.Namespace) -> int:
    instances = read_instances_jsonl(args.test)
    instruction = resolve_instruction(config)
    backend = _make_model_backend(config)
    report = evaluation.run_eval(
        backend, instances, instruction,
        max_new_tokens=config.eval_max_new_tokens,
        concurrency=config.eval_concurrency,
        max_error_rate=config.eval_max_error_rate,
        seed=config.seed,
        mode="baseline" if args.baseline else "model",
    )

    _write_json(args.report, report.to_dict())
    _write_json(args.raw_out, {
        "schema_version": 1,
        "metadata": dict(report.metadata),
        "rows": evaluation.rows_to_dicts(report.rows),
    })
    print(evaluation.format_summary(report))
    print(f"\nreport: {args.report}\nraw outputs: {args.raw_out}")
    return 0


# ---------------------------------------------------------------------------
# bench


def _bench_prompts(config: ToolConfig, args: argparse.Namespace) -> tuple[str, ...]:
    if args.prompt_file:
        text = Path(args.prompt_file).read_text(encoding="utf-8")
        try:
            data = json.loads(text)
        except json.JSONDecodeError:
            data = None
        if isinstance(data, list) and data and all(isinstance(p, str) for p in data):
            return tuple(data)
        return (text,)
    instruction = resolve_instruction(config)
    return (backend_mod.assemble_prompt(instruction, _BENCH_SNIPPET),)


def cmd_bench(config: ToolConfig, args: argparse.Namespace) -> int:
    backend = _make_model_backend(config)
    prompts = _bench_prompts(config, args)

    if args.dry_run:
        for i in range(config.bench_warmup):
            backend.complete(backend_mod.CompletionRequest(
                prompt=prompts[i % len(prompts)],
                max_new_tokens=config.bench_max_new_tokens))
        print(f"dry run: {config.bench_warmup} warmup request(s) completed, "
              "no statistics collected")
        return 0

    bench_config = bench_mod.BenchConfig(
        prompts=prompts,
        warmup_requests=config.bench_warmup,
        measured_requests=config.bench_measured,
        max_new_tokens=config.bench_max_new_tokens,
        host_description=config.bench_host,
    )
    report = bench_mod.run_bench(backend, bench_config)
    _write_json(args.report, report.to_dict())
    print(bench_mod.format_bench_table(report))
    print(f"\nreport: {args.report}")
    return 0


# ---------------------------------------------------------------------------
# scan


@dataclass(frozen=True)
class ScanFinding:
    path: str
    status: str  # secure | vulnerable | unparseable | skipped | error
    cwe: str | None = None
    raw: str | None = None
    detail: str | None = None

    def to_dict(self) -> dict:
        return {"path": self.path, "status": self.status, "cwe": self.cwe,
                "raw": self.raw, "detail": self.detail}


def _scan_one(backend, instruction: str, config: ToolConfig, path: str) -> ScanFinding:
    if path == "-":
        code = sys.stdin.read()
        shown = "<stdin>"
    else:
        shown = path
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            return ScanFinding(path=shown, status="error", detail=str(exc))
        if len(data) > config.scan_max_bytes:
            return ScanFinding(
                path=shown, status="skipped",
                detail=f"file is {len(data)} bytes, over the {config.scan_max_bytes} limit")
        code = data.decode("utf-8", errors="replace")
    if not code.strip():
        return ScanFinding(path=shown, status="error", detail="file is empty")

    # The snippet is only ever embedded in a prompt; it is never imported or run.
    try:
        prompt = backend_mod.assemble_prompt(instruction, code)
        result = backend.complete(backend_mod.CompletionRequest(
            prompt=prompt, max_new_tokens=config.eval_max_new_tokens))
    except CwekitError as exc:
        return ScanFinding(path=shown, status="error", detail=str(exc))

    parsed = evaluation.parse_model_output(result.text)
    if parsed.kind == evaluation.VULNERABLE:
        cwe = parsed.cwe.canonical if parsed.cwe else None
        return ScanFinding(path=shown, status="vulnerable", cwe=cwe, raw=result.text)
    if parsed.kind == evaluation.SECURE:
        return ScanFinding(path=shown, status="secure", raw=result.text)
    return ScanFinding(path=shown, status="unparseable", raw=result.text)


def cmd_scan(config: ToolConfig, args: argparse.Namespace) -> int:
    backend = _make_model_backend(config)
    instruction = resolve_instruction(config)

    paths = list(args.paths)
    if config.scan_jobs > 1:
        with ThreadPoolExecutor(max_workers=config.scan_jobs) as pool:
            findings = list(pool.map(
                lambda p: _scan_one(backend, instruction, config, p), paths))
    else:
        findings = [_scan_one(backend, instruction, config, p) for p in paths]

    vulnerable = [f for f in findings if f.status == "vulnerable"]
    errors = [f for f in findings if f.status == "error"]
    scanned = [f for f in findings if f.status in ("secure", "vulnerable", "unparseable")]
    if vulnerable:
        exit_code = 1
    elif errors or not scanned:
        exit_code = 2
    else:
        exit_code = 0

    _write_json(args.report, {
        "schema_version": 1,
        "backend": getattr(backend, "id", "unknown"),
        "findings": [f.to_dict() for f in findings],
        "exit_code": exit_code,
    })

    for finding in findings:
        if finding.status == "vulnerable":
            label = f"Vulnerable - {finding.cwe}" if finding.cwe else "Vulnerable (CWE unknown)"
            print(f"{finding.path}: {label}")
        elif finding.status == "secure":
            print(f"{finding.path}: Secure")
        elif finding.status == "unparseable":
            print(f"{finding.path}: model output not parseable")
        elif finding.status == "skipped":
            print(f"{finding.path}: skipped ({finding.detail})")
        else:
            print(f"{finding.path}: error ({finding.detail})")
    print(f"report: {args.report}")
    return exit_code


# ---------------------------------------------------------------------------
# wiring

# Flags whose values flow into ToolConfig keys, per subcommand.
_FLAG_KEYS = {
    "generate": {"pairs": "pairs_per_cwe", "max_retries": "generation_max_retries",
                 "generation_backend": "generation_backend", "generation_url": "generation_url",
                 "fixture_dir": "fixture_dir", "review_dir": "review_dir",
                 "catalog": "catalog_path"},
    "review-serve": {"review_dir": "review_dir", "ui_dir": "ui_dir"},
    "assemble": {"review_dir": "review_dir", "test_size": "test_size", "seed": "seed",
                 "catalog": "catalog_path"},
    "eval": {"max_new_tokens": "eval_max_new_tokens", "concurrency": "eval_concurrency",
             "max_error_rate": "eval_max_error_rate", "seed": "seed",
             "adapter": "backend_adapter"},
    "bench": {"warmup": "bench_warmup", "measured": "bench_measured",
              "max_new_tokens": "bench_max_new_tokens", "host": "bench_host",
              "adapter": "backend_adapter"},
    "scan": {"jobs": "scan_jobs", "max_bytes": "scan_max_bytes",
             "adapter": "backend_adapter"},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cwekit",
        description="Build, review, and evaluate a CWE detector for Python code.")
    parser.add_argument("--config", metavar="PATH", help="flat key = value config file")
    parser.add_argument("--backend-url", dest="backend_url",
                        help="completion endpoint, http(s)://host or script:<dir>")
    parser.add_argument("--instruction-file", dest="instruction_file",
                        help="file holding the instruction text")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate candidate pairs into the review queue")
    p.add_argument("--cwe", action="append", help="limit to this CWE (repeatable)")
    p.add_argument("--pairs", type=int, help="pairs per CWE")
    p.add_argument("--max-retries", type=int, dest="max_retries")
    p.add_argument("--generation-backend", choices=("http", "fixture"),
                   dest="generation_backend")
    p.add_argument("--generation-url", dest="generation_url")
    p.add_argument("--fixture-dir", dest="fixture_dir")
    p.add_argument("--review-dir", dest="review_dir")
    p.add_argument("--catalog", dest="catalog")
    p.add_argument("--report", help="where to write the generation report JSON")

    p = sub.add_parser("review-serve", help="serve the review API and web UI")
    p.add_argument("--bind", default="127.0.0.1:8100")
    p.add_argument("--review-dir", dest="review_dir")
    p.add_argument("--ui-dir", dest="ui_dir")

    p = sub.add_parser("assemble", help="expand accepted pairs and split train/test")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--review-dir", dest="review_dir")
    p.add_argument("--test-size", type=int, dest="test_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--catalog", dest="catalog")

    p = sub.add_parser("eval", help="evaluate the backend on a labelled test set")
    p.add_argument("--test", required=True, help="test set JSONL")
    p.add_argument("--baseline", action="store_true",
                   help="tag the run as a zero-shot baseline")
    p.add_argument("--report", default="eval_report.json")
    p.add_argument("--raw-out", dest="raw_out", default="eval_raw_outputs.json")
    p.add_argument("--max-new-tokens", type=int, dest="max_new_tokens")
    p.add_argument("--concurrency", type=int)
    p.add_argument("--max-error-rate", type=float, dest="max_error_rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--adapter", choices=("native", "openai"))

    p = sub.add_parser("bench", help="measure TTFT, throughput, and latency percentiles")
    p.add_argument("--warmup", type=int)
    p.add_argument("--measured", type=int)
    p.add_argument("--max-new-tokens", type=int, dest="max_new_tokens")
    p.add_argument("--prompt-file", dest="prompt_file",
                   help="JSON array of prompts, or plain text for one prompt")
    p.add_argument("--host", help="free-form host description for the report")
    p.add_argument("--report", default="bench_report.json")
    p.add_argument("--dry-run", action="store_true", dest="dry_run",
                   help="run warmups only and exit")
    p.add_argument("--adapter", choices=("native", "openai"))

    p = sub.add_parser("scan", help="classify files; never executes the scanned code")
    p.add_argument("paths", nargs="+", help="files to scan, or - for stdin")
    p.add_argument("--jobs", type=int)
    p.add_argument("--max-bytes", type=int, dest="max_bytes")
    p.add_argument("--report", default="scan_report.json")
    p.add_argument("--adapter", choices=("native", "openai"))

    return parser


_COMMANDS = {
    "generate": cmd_generate,
    "review-serve": cmd_review_serve,
    "assemble": cmd_assemble,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "scan": cmd_scan,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    flags: dict[str, object] = {
        "backend_url": args.backend_url,
        "instruction_file": args.instruction_file,
    }
    for attr, key in _FLAG_KEYS.get(args.command, {}).items():
        flags[key] = getattr(args, attr, None)

    try:
        config = resolve_config(flags=flags, env=os.environ, config_path=args.config)
        return _COMMANDS[args.command](config, args)
    except CwekitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))
