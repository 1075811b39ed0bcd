"""Command line entry point: ``killchain <command> --config FILE [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .data import IngestionError
from .model import ModelFormatError
from .oracle import BudgetExhausted, ServeError, serve_victim
from .pipeline import (
    EVASION_FILE,
    EXTRACTION_FILE,
    REPORT_FILE,
    SUBSTITUTE_FILE,
    VICTIM_FILE,
    VICTIM_METRICS,
    ArtifactMissing,
    Scenario,
    StageClock,
    StageError,
    assemble_report,
    make_oracle,
    prepare_scenario,
    read_json,
    require_model,
    stage_evade,
    stage_extract,
    stage_train_victim,
    write_json,
)
from .report import ReportValidationError, validate_report, write_charts, write_tables

log = logging.getLogger("killchain")

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_MISSING, EXIT_INTERNAL = 0, 2, 3, 4, 5
ARTIFACTS = (VICTIM_FILE, VICTIM_METRICS, SUBSTITUTE_FILE, EXTRACTION_FILE, EVASION_FILE, REPORT_FILE,
             "fidelity_curve.csv", "evasion.csv", "fidelity_vs_budget.svg", "victim_metric_vs_epsilon.svg")


def cmd_train_victim(cfg: RunConfig, scenario: Scenario | None = None, clock: StageClock | None = None) -> dict:
    out = Path(cfg.out)
    clock = clock or StageClock()
    sc = scenario or clock.run("setup", prepare_scenario, cfg)
    _, metrics = clock.run("train_victim", stage_train_victim, cfg, sc, out)
    return metrics


def cmd_extract(cfg: RunConfig, scenario: Scenario | None = None, clock: StageClock | None = None) -> dict:
    out = Path(cfg.out)
    clock = clock or StageClock()
    sc = scenario or clock.run("setup", prepare_scenario, cfg)
    oracle = clock.run("oracle", make_oracle, cfg, out)
    clock.run("extract", stage_extract, cfg, sc, oracle, out)
    return read_json(out / EXTRACTION_FILE)


def cmd_evade(cfg: RunConfig, scenario: Scenario | None = None, clock: StageClock | None = None) -> dict:
    """Evasion stage; also assembles and writes the full report from the stage artifacts."""
    out = Path(cfg.out)
    clock = clock or StageClock()
    victim = require_model(out / VICTIM_FILE)
    substitute = require_model(out / SUBSTITUTE_FILE)
    victim_info = read_json(out / VICTIM_METRICS)
    extraction = read_json(out / EXTRACTION_FILE)
    sc = scenario or clock.run("setup", prepare_scenario, cfg)
    oracle = clock.run("oracle", make_oracle, cfg, out)
    evasion = clock.run("evade", stage_evade, cfg, sc, victim, substitute, oracle, out)
    report = validate_report(assemble_report(cfg, victim_info, extraction, evasion, clock.timings))
    write_json(out / REPORT_FILE, report)
    clock.run("report", _emit, report, out)
    return report


def cmd_report(out) -> dict:
    """Re-validate an existing report and regenerate its tables and charts."""
    out = Path(out)
    report = validate_report(read_json(out / REPORT_FILE))
    _emit(report, out)
    return report


def _emit(report: dict, out: Path) -> None:
    write_tables(report, out)
    write_charts(report, out)


def cmd_killchain(cfg: RunConfig) -> dict:
    """All four stages in one run; on failure the artifacts written so far get a ``.partial`` suffix."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    clock = StageClock()
    try:
        sc = clock.run("setup", prepare_scenario, cfg)
        cmd_train_victim(cfg, sc, clock)
        cmd_extract(cfg, sc, clock)
        return cmd_evade(cfg, sc, clock)
    except Exception:
        for name in ARTIFACTS:
            p = out / name
            if p.is_file() and p.stat().st_mtime >= started - 1:
                p.replace(p.with_name(p.name + ".partial"))
        raise


# ------------------------------------------------------------------------ CLI


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="killchain", description="Model extraction to evasion kill chain")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train-victim", "extract", "evade", "killchain", "report"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="TOML run config")
        sp.add_argument("--scenario", choices=("tsr", "pd", "toy2d"), help="scenario when no config file sets one")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=str)
        sp.add_argument("--endpoint", type=str, help="remote oracle URL (overrides oracle.endpoint)")
        sp.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    sp = sub.add_parser("serve")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.add_argument("--mode", choices=("soft", "hard", "box"))
    sp.add_argument("--budget", type=int, help="total images the service will answer (default unlimited)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve(args) -> RunConfig:
    overrides = {"seed": args.seed, "out": args.out}
    if args.scenario:
        overrides["scenario"] = args.scenario
    cfg = load_config(args.config, **overrides)
    if args.endpoint:
        cfg.oracle.endpoint = args.endpoint
    return cfg


def _exit_code(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, ConfigError):
        return EXIT_CONFIG
    if isinstance(cause, BudgetExhausted):
        return EXIT_BUDGET
    if isinstance(cause, (ArtifactMissing, IngestionError, ModelFormatError, ReportValidationError,
                          FileNotFoundError)):
        return EXIT_MISSING
    return EXIT_INTERNAL


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "serve":
            serve_victim(args.model, args.host, args.port, args.mode, args.budget)
            return EXIT_OK
        cfg = _resolve(args)
        if args.print_config:
            print(cfg.dumps())
            return EXIT_OK
        if args.command == "report":
            report = cmd_report(cfg.out)
        else:
            report = {"train-victim": cmd_train_victim, "extract": cmd_extract,
                      "evade": cmd_evade, "killchain": cmd_killchain}[args.command](cfg)
        _summarize(args.command, report)
        return EXIT_OK
    except KeyboardInterrupt:
        return EXIT_OK
    except ServeError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # every failure maps onto a documented exit code
        log.error("%s", exc, exc_info=_exit_code(exc) == EXIT_INTERNAL)
        return _exit_code(exc)


def _summarize(command: str, report: dict) -> None:
    if command == "train-victim":
        shown = {k: v for k, v in report.items() if isinstance(v, float)}
        print("victim:", ", ".join(f"{k}={v:.4f}" for k, v in shown.items()))
    elif command == "extract":
        for cp in report["checkpoints"]:
            print(f"budget={cp['budget']:>6}  fidelity={cp['fidelity']:.4f}  {report['task_metric_name']}={cp['task_metric']:.4f}")
    elif "evasion" in report:
        ev = report["evasion"]
        for key in ("whitebox", "transfer"):
            row = ", ".join(f"{r['epsilon']:g}:{r['adversarial_metric']:.3f}" for r in ev[key])
            print(f"{key:>9} victim metric by epsilon  {row}")
        print(f"minimal epsilon {ev['minimal_epsilon']}  gap={ev['epsilon_gap']}")


if __name__ == "__main__":
    sys.exit(main())
