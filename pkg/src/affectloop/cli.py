"""Command-line entry points: run, audit, replay, sweep.

Exit codes: 0 success, 1 audit or replay failure, 2 bad config or usage,
3 run aborted by an interface-contract violation, 4 missing input artifacts.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import ValidationError

from .audit import MissingTraces, audit_artifacts
from .config import INJECTOR_NAMES, RunConfig, load_config, reference_config
from .controller import replay
from .system import MetricsRow, RunResult, build_system, resolve_scenario_path, run_system
from .world import Perception

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SIC, EXIT_MISSING = 0, 1, 2, 3, 4

TRACES = "traces.jsonl"
METRICS = "metrics.csv"
HASHES = "frozen_hash.json"
MANIFEST = "manifest.json"
STATUS = "run_status.json"
CONFIG = "config.json"
AUDIT = "audit.json"


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def resolve_config(args) -> RunConfig:
    path = getattr(args, "config", None)
    cfg = load_config(path) if path else reference_config()
    if path:
        cfg = resolve_scenario_path(cfg, path)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
    if getattr(args, "injector", None):
        changes["features.injectors"] = list(cfg.features.injectors) + list(args.injector)
    if getattr(args, "ablate_memory", False):
        changes["features.ablate_memory"] = True
    return cfg.with_overrides(**changes) if changes else cfg


def metrics_csv(result: RunResult, need_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricsRow.header(need_names))
    for row in result.metrics:
        w.writerow(row.row())
    return buf.getvalue()


def write_run(cfg: RunConfig, out_dir: Path) -> RunResult:
    system = build_system(cfg)
    result = run_system(system)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG).write_text(cfg.to_json() + "\n")
    (out_dir / TRACES).write_text("".join(json.dumps(r) + "\n" for r in result.records))
    (out_dir / METRICS).write_text(metrics_csv(result, system.scenario.perception.needs))
    (out_dir / HASHES).write_text(_dump({"pre": result.hashes_pre, "post": result.hashes_post}))
    (out_dir / MANIFEST).write_text(_dump(result.manifest))
    v = result.violation
    status = {"ticks": len(result.traces), "violation": None}
    if v is not None:
        status["violation"] = {"clause": v.clause, "message": str(v)}
    (out_dir / STATUS).write_text(_dump(status))
    return result


def read_traces(path: Path) -> List[dict]:
    if not path.is_file():
        raise MissingTraces(f"trace file not found: {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    result = write_run(cfg, Path(args.out_dir))
    if result.violation is not None:
        print(f"run aborted: {result.violation}", file=sys.stderr)
        return EXIT_SIC
    print(f"ran {len(result.traces)} ticks, outputs in {args.out_dir}")
    return EXIT_OK


def _config_for_artifacts(args, out_dir: Path) -> RunConfig:
    if getattr(args, "config", None):
        return resolve_config(args)
    saved = out_dir / CONFIG
    if saved.is_file():
        return load_config(saved)
    return resolve_config(args)


def cmd_audit(args) -> int:
    out_dir = Path(args.out_dir)
    records = read_traces(Path(args.traces) if args.traces else out_dir / TRACES)
    for name in (MANIFEST, HASHES):
        if not (out_dir / name).is_file():
            raise MissingTraces(f"artifact not found: {out_dir / name}")
    cfg = _config_for_artifacts(args, out_dir)
    system = build_system(cfg)
    manifest = json.loads((out_dir / MANIFEST).read_text())
    hashes = json.loads((out_dir / HASHES).read_text())
    violations = []
    status_path = out_dir / STATUS
    if status_path.is_file():
        v = json.loads(status_path.read_text()).get("violation")
        if v:
            violations.append(v["clause"])
    report = audit_artifacts(system, records, manifest, hashes["pre"], hashes["post"], violations)
    (out_dir / AUDIT).write_text(report.to_json())
    for check, status in report.statuses().items():
        print(f"{check}: {status}")
    if not report.passed:
        print(f"audit failed: {', '.join(report.failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_replay(args) -> int:
    out_dir = Path(args.out_dir)
    records = read_traces(Path(args.traces) if args.traces else out_dir / TRACES)
    cfg = _config_for_artifacts(args, out_dir)
    system = build_system(cfg)
    res = replay(records, system.params, Perception(system.scenario.perception))
    if not res.ok:
        print(f"replay mismatch at tick {res.failed_tick}, field {res.failed_field!r}", file=sys.stderr)
        return EXIT_FAIL
    print(f"replay verified {res.ticks} ticks")
    return EXIT_OK


def _sweep_one(job) -> tuple:
    cfg_json, seed, out_dir = job
    cfg = RunConfig.model_validate_json(cfg_json).with_overrides(seed=seed)
    result = write_run(cfg, Path(out_dir))
    return seed, None if result.violation is None else result.violation.clause


def parse_seeds(text: str) -> List[int]:
    seeds: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    return seeds


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    seeds = parse_seeds(args.seeds)
    root = Path(args.out_dir)
    jobs = [(cfg.model_dump_json(by_alias=True), s, str(root / f"seed_{s}")) for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_sweep_one, jobs))
    else:
        outcomes = [_sweep_one(j) for j in jobs]
    code = EXIT_OK
    for seed, clause in outcomes:
        print(f"seed {seed}: {'ok' if clause is None else f'aborted ({clause})'}")
        if clause is not None:
            code = EXIT_SIC
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affectloop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, run_flags=True):
        p.add_argument("--config", help="run config JSON (default: built-in reference)")
        p.add_argument("--out-dir", default="out", help="artifact directory")
        if run_flags:
            p.add_argument("--seed", type=int)
            p.add_argument("--steps", type=int)
            p.add_argument("--injector", action="append", choices=INJECTOR_NAMES)
            p.add_argument("--ablate-memory", action="store_true")

    p = sub.add_parser("run", help="run the closed loop and write traces and metrics")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("audit", help="audit run artifacts and write audit.json")
    common(p)
    p.add_argument("--traces", help="trace file (default: <out-dir>/traces.jsonl)")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("replay", help="re-check logged traces bit-exactly")
    common(p)
    p.add_argument("--traces", help="trace file (default: <out-dir>/traces.jsonl)")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("sweep", help="run several seeds, optionally in parallel")
    common(p)
    p.add_argument("--seeds", default="0-9", help="e.g. 0-9 or 1,4,7")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MissingTraces as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ValidationError, ValueError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
