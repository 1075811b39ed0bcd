"""Kill-chain report schema, CSV tables and SVG charts."""

from __future__ import annotations

import csv
from pathlib import Path

import jsonschema
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_unit = {"type": "number", "minimum": 0.0, "maximum": 1.0}
_unit_or_null = {"type": ["number", "null"], "minimum": 0.0, "maximum": 1.0}

_transfer = {
    "type": "object",
    "required": ["source", "metric", "epsilon", "clean_metric", "adversarial_metric", "success_rate", "n"],
    "properties": {
        "epsilon": _unit,
        "clean_metric": _unit,
        "adversarial_metric": _unit,
        "source_adversarial_metric": _unit_or_null,
        "success_rate": _unit,
        "n": {"type": "integer", "minimum": 0},
    },
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["version", "config_hash", "scenario", "victim", "extraction", "evasion"],
    "properties": {
        "version": {"const": 1},
        "config_hash": {"type": "string"},
        "scenario": {"enum": ["tsr", "pd", "toy2d"]},
        "victim": {
            "type": "object",
            "required": ["model_hash"],
            "properties": {k: _unit for k in ("train_acc", "test_acc", "test_top5_accuracy", "test_top1_accuracy",
                                              "mean_iou", "train_mean_iou")},
        },
        "extraction": {
            "type": "object",
            "required": ["strategy", "budget_spent", "checkpoints", "substitute_hash"],
            "properties": {
                "budget_spent": {"type": "integer", "minimum": 0},
                "checkpoints": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["budget", "fidelity", "task_metric"],
                        "properties": {
                            "budget": {"type": "integer", "minimum": 1},
                            "fidelity": _unit,
                            "task_metric": _unit,
                            "metrics": {"type": "object", "additionalProperties": _unit},
                        },
                    },
                },
            },
        },
        "evasion": {
            "type": "object",
            "required": ["whitebox", "transfer", "substitute_hash"],
            "properties": {
                "whitebox": {"type": "array", "items": _transfer},
                "transfer": {"type": "array", "items": _transfer},
                "epsilon_gap": {"type": ["number", "null"]},
            },
        },
    },
}


class ReportValidationError(ValueError):
    pass


def validate_report(report: dict) -> dict:
    try:
        jsonschema.validate(report, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ReportValidationError(f"report invalid at {where}: {exc.message}") from None
    if report["evasion"]["substitute_hash"] != report["extraction"]["substitute_hash"]:
        raise ReportValidationError("evasion and extraction reference different substitutes")
    return report


def write_tables(report: dict, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    curve = out / "fidelity_curve.csv"
    with open(curve, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["budget", "fidelity", "task_metric"])
        for cp in report["extraction"]["checkpoints"]:
            w.writerow([cp["budget"], f"{cp['fidelity']:.6f}", f"{cp['task_metric']:.6f}"])
    evasion = out / "evasion.csv"
    with open(evasion, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "epsilon", "clean_metric", "adversarial_metric", "source_adversarial_metric",
                    "success_rate"])
        for key in ("whitebox", "transfer"):
            for r in report["evasion"][key]:
                src = r.get("source_adversarial_metric")
                w.writerow([key, r["epsilon"], f"{r['clean_metric']:.6f}", f"{r['adversarial_metric']:.6f}",
                            "" if src is None else f"{src:.6f}", f"{r['success_rate']:.6f}"])
    return [curve, evasion]


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def write_charts(report: dict, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    ex = report["extraction"]
    budgets = [cp["budget"] for cp in ex["checkpoints"]]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(budgets, [cp["fidelity"] for cp in ex["checkpoints"]], marker="o", label=ex.get("fidelity_name", "fidelity"))
    ax.plot(budgets, [cp["task_metric"] for cp in ex["checkpoints"]], marker="s",
            label=ex.get("task_metric_name", "task metric"))
    ax.set_xlabel("query budget")
    ax.set_ylabel("metric")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"extraction ({ex['strategy']})")
    ax.legend()
    paths = [_save(fig, out / "fidelity_vs_budget.svg")]

    ev = report["evasion"]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in (("whitebox", "white-box (victim gradients)"), ("transfer", "transfer (substitute gradients)")):
        rows = ev[key]
        ax.plot([r["epsilon"] for r in rows], [r["adversarial_metric"] for r in rows], marker="o", label=label)
    metric = ev["whitebox"][0]["metric"] if ev["whitebox"] else "metric"
    ax.set_xlabel("epsilon (L-inf, fraction of pixel range)")
    ax.set_ylabel(f"victim {metric}")
    ax.set_ylim(0, 1.02)
    ax.legend()
    paths.append(_save(fig, out / "victim_metric_vs_epsilon.svg"))
    return paths
