"""Command line entry point: ``hflsim run|validate|compare-flat CONFIG``.

Exit codes: 0 success, 2 invalid or unreadable configuration, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from hflsim.config import ScenarioConfig, flatten, load_and_validate
from hflsim.engine import CSV_COLUMNS, SimulationResult, format_units, run_simulation
from hflsim.errors import ConfigError, ConfigValidationError, ParseError

OUTPUT_ENV = "HFLSIM_OUTPUT_DIR"
DEFAULT_OUTPUT = "hflsim-out"

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("hflsim")


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def metrics_csv(result: SimulationResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for m in result.metrics:
        writer.writerow(m.csv_row())
    return buf.getvalue()


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True, allow_nan=False) + "\n" for r in records)


def write_outputs(result: SimulationResult, cfg: ScenarioConfig, out: Path) -> list[Path]:
    files = {
        "metrics.csv": metrics_csv(result),
        "results.json": dumps(_clean(result.to_document(cfg))),
        "linkability.json": dumps(result.linkability.to_record()),
        "adversary_log.jsonl": _jsonl(result.adversary_log),
    }
    if cfg.dump_trace:
        files["trace.jsonl"] = _jsonl(m.to_record() for m in result.trace.messages)
    written = []
    for name, text in files.items():
        write_atomic(out / name, text)
        written.append(out / name)
    return written


def _clean(obj):
    """JSON cannot carry NaN; map non-finite floats to null."""
    if isinstance(obj, float):
        return obj if np.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def resolve_output(cfg: ScenarioConfig, flag: str | None) -> Path:
    return Path(flag or os.environ.get(OUTPUT_ENV) or cfg.output_dir or DEFAULT_OUTPUT)


def _load(path: str, seed: int | None = None, rounds: int | None = None) -> ScenarioConfig:
    return load_and_validate(path).with_overrides(seed=seed, rounds=rounds)


def _report_config_error(exc: ConfigError) -> None:
    if isinstance(exc, ConfigValidationError):
        for item in exc.errors:
            print(f"error: {item}", file=sys.stderr)
    elif isinstance(exc, ParseError):
        print(f"parse error: {exc}", file=sys.stderr)
    else:
        print(f"error: {exc}", file=sys.stderr)


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        cfg = _load(args.config)
    except ConfigError as exc:
        _report_config_error(exc)
        return EXIT_CONFIG
    print(f"ok: {cfg.name} ({len(cfg.hierarchy)} nodes, {len(cfg.hierarchy.users())} users, "
          f"{cfg.global_rounds} rounds)")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = _load(args.config, args.seed, args.rounds)
    except ConfigError as exc:
        _report_config_error(exc)
        return EXIT_CONFIG
    out = resolve_output(cfg, args.out)
    try:
        result = run_simulation(cfg)
        write_outputs(result, cfg, out)
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        log.debug("run failed", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    last = result.root_metrics()[-1] if result.root_metrics() else None
    summary = f"final accuracy {last.test_accuracy:.4f}" if last else "no rounds run"
    print(f"{cfg.name}: {summary}; outputs in {out}")
    return EXIT_OK


def _side(result: SimulationResult) -> dict:
    root = result.hierarchy.root
    roots = result.root_metrics()
    per_round = [c.verify_units for c in result.costs]
    return {
        "final_accuracy": roots[-1].test_accuracy if roots else None,
        "final_loss": roots[-1].test_loss if roots else None,
        "verify_units_per_round": per_round[0] if per_round and len(set(per_round)) == 1
        else (float(np.mean(per_round)) if per_round else 0.0),
        "verify_units_by_round": per_round,
        "verify_units_total": float(sum(per_round)),
        "comm_bytes_total": result.costs[-1].cumulative_comm_bytes if result.costs else 0,
        "user_links": len(result.linkability.links),
        "root_user_links": len(result.linkability.users_linked_to(root)),
        "linkability": result.linkability.to_record(),
        "final_model": [float(v) for v in result.final_model.values],
    }


def compare_flat(cfg: ScenarioConfig) -> dict:
    hier = run_simulation(cfg)
    flat = run_simulation(flatten(cfg))
    diff = float(np.max(np.abs(hier.final_model.values - flat.final_model.values)))
    h, f = _side(hier), _side(flat)
    return {
        "scenario": cfg.name,
        "hierarchical": h,
        "flat": f,
        "max_coord_diff": diff,
        "identical_accuracy": h["final_accuracy"] == f["final_accuracy"],
    }


def format_comparison(report: dict) -> str:
    h, f = report["hierarchical"], report["flat"]

    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return format_units(v) if v.is_integer() else f"{v:.6g}"
        return str(v)

    rows = [
        ("final accuracy", h["final_accuracy"], f["final_accuracy"]),
        ("final loss", h["final_loss"], f["final_loss"]),
        ("verify units/round", h["verify_units_per_round"], f["verify_units_per_round"]),
        ("verify units total", h["verify_units_total"], f["verify_units_total"]),
        ("comm bytes total", h["comm_bytes_total"], f["comm_bytes_total"]),
        ("server->user links", h["user_links"], f["user_links"]),
        ("root->user links", h["root_user_links"], f["root_user_links"]),
    ]
    width = max(len(r[0]) for r in rows)
    lines = [f"{'':<{width}}  {'hierarchical':>16}  {'flat':>16}"]
    lines += [f"{name:<{width}}  {cell(a):>16}  {cell(b):>16}" for name, a, b in rows]
    lines.append(f"max |coordinate diff| of final models: {report['max_coord_diff']:.3e}")
    return "\n".join(lines)


def cmd_compare_flat(args: argparse.Namespace) -> int:
    try:
        cfg = _load(args.config, args.seed, args.rounds)
    except ConfigError as exc:
        _report_config_error(exc)
        return EXIT_CONFIG
    out = resolve_output(cfg, args.out)
    try:
        report = compare_flat(cfg)
        write_atomic(out / "compare.json", dumps(_clean(report)))
    except Exception as exc:  # noqa: BLE001
        log.debug("compare failed", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(format_comparison(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hflsim", description="Hierarchical federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_overrides(p: argparse.ArgumentParser) -> None:
        p.add_argument("config", help="scenario file (JSON)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--rounds", type=int, help="override the number of global rounds")
        p.add_argument("--out", help=f"output directory (else ${OUTPUT_ENV}, the config, or ./{DEFAULT_OUTPUT})")

    p_run = sub.add_parser("run", help="run a scenario and write metrics and results")
    with_overrides(p_run)
    p_run.set_defaults(func=cmd_run)

    p_val = sub.add_parser("validate", help="check a scenario file without running it")
    p_val.add_argument("config")
    p_val.set_defaults(func=cmd_validate)

    p_cmp = sub.add_parser("compare-flat", help="run a scenario and its flattened equivalent side by side")
    with_overrides(p_cmp)
    p_cmp.set_defaults(func=cmd_compare_flat)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
