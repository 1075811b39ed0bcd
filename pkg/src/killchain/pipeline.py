"""Kill-chain stages shared by the monolithic run and the stage-wise commands."""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import (
    LabeledDataset,
    default_cache_dir,
    load_gtsrb,
    make_synthetic_pd_dataset,
    make_toy2d_dataset,
    train_test_split,
)
from .evasion import SweepResult, epsilon_gap, epsilon_sweep
from .extraction import ExtractionReport, extract, task_metrics
from .model import FORMAT_VERSION, TrainedModel, load_model, predict, save_model, train
from .oracle import OracleHandle
from .signs import write_synthetic_gtsrb

log = logging.getLogger(__name__)

REPORT_VERSION = 1
VOLATILE_KEYS = ("timings", "created_at", "environment")

VICTIM_FILE = "victim.kcm"
VICTIM_METRICS = "victim_metrics.json"
SUBSTITUTE_FILE = "substitute.kcm"
EXTRACTION_FILE = "extraction.json"
EVASION_FILE = "evasion.json"
REPORT_FILE = "report.json"


class ArtifactMissing(Exception):
    """An upstream artifact required by a stage does not exist."""


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Scenario:
    train: LabeledDataset
    test: LabeledDataset
    source: str


def synthetic_gtsrb_root(cfg: RunConfig) -> Path:
    d = cfg.dataset
    key = json.dumps({"classes": d.classes, "tracks": d.synthetic_tracks, "frames": d.synthetic_frames,
                      "seed": cfg.seed}, sort_keys=True)
    base = Path(d.cache_dir) if d.cache_dir else default_cache_dir()
    root = base / f"synthetic_gtsrb_{hashlib.sha256(key.encode()).hexdigest()[:12]}"
    if not (root / ".complete").is_file():
        log.info("writing synthetic GTSRB stand-in to %s", root)
        write_synthetic_gtsrb(root, d.classes, d.synthetic_tracks, d.synthetic_frames, seed=cfg.seed)
        (root / ".complete").write_text("ok\n")
    return root


def prepare_scenario(cfg: RunConfig) -> Scenario:
    d = cfg.dataset
    if cfg.scenario == "tsr":
        root = Path(d.root) if d.root else synthetic_gtsrb_root(cfg)
        full = load_gtsrb(root, d.classes, tuple(d.image_size))
        train_ds, test_ds = train_test_split(full, d.test_fraction, cfg.seed)
        return Scenario(train_ds, test_ds, "gtsrb" if d.root else "synthetic_gtsrb")
    if cfg.scenario == "pd":
        size = tuple(d.image_size)
        return Scenario(make_synthetic_pd_dataset(d.n_train, size, cfg.seed),
                        make_synthetic_pd_dataset(d.n_test, size, cfg.seed + 1).subset(range(d.n_test), "test"),
                        "synthetic_pd")
    return Scenario(make_toy2d_dataset(d.n_train, cfg.seed),
                    make_toy2d_dataset(d.n_test, cfg.seed + 1).subset(range(d.n_test), "test"), "toy2d")


def victim_metrics(m: TrainedModel, sc: Scenario, topk: int) -> dict:
    tr = task_metrics(m, sc.train, topk)
    te = task_metrics(m, sc.test, topk)
    if m.kind == "localizer":
        return {"train_mean_iou": tr["mean_iou"], "mean_iou": te["mean_iou"]}
    out = {"train_acc": tr["accuracy"], "test_acc": te["accuracy"]}
    out.update({f"test_{k}": v for k, v in te.items() if k != "accuracy"})
    return out


# --------------------------------------------------------------------- stages


def stage_train_victim(cfg: RunConfig, sc: Scenario, out: Path) -> tuple[TrainedModel, dict]:
    victim = train(cfg.arch("victim"), sc.train, cfg.train_config("victim"))
    metrics = victim_metrics(victim, sc, cfg.extraction.topk)
    metrics["model_hash"] = victim.fingerprint()
    metrics["data_source"] = sc.source
    save_model(victim, out / VICTIM_FILE)
    write_json(out / VICTIM_METRICS, metrics)
    return victim, metrics


def make_oracle(cfg: RunConfig, out: Path) -> OracleHandle:
    if cfg.oracle.endpoint:
        return OracleHandle.remote(cfg.oracle.endpoint, budget=cfg.oracle.budget)
    victim = require_model(out / VICTIM_FILE)
    return OracleHandle.local(victim, cfg.oracle.mode, cfg.oracle.budget)


def stage_extract(cfg: RunConfig, sc: Scenario, oracle: OracleHandle, out: Path) -> tuple[TrainedModel, ExtractionReport]:
    ex = cfg.extraction
    substitute, report = extract(
        oracle, cfg.strategy(), ex.budget, cfg.arch("substitute"), cfg.train_config("substitute"),
        sc.test, ex.checkpoints, public_data=sc.train, min_steps=ex.min_steps, topk=ex.topk)
    save_model(substitute, out / SUBSTITUTE_FILE)
    payload = report.to_dict()
    payload["oracle"] = {"backend": "remote" if cfg.oracle.endpoint else "local", "mode": oracle.label_mode,
                         "budget": cfg.oracle.budget, "queries_used": oracle.used,
                         "eval_queries": oracle.eval_queries}
    write_json(out / EXTRACTION_FILE, payload)
    return substitute, report


def stage_evade(cfg: RunConfig, sc: Scenario, victim: TrainedModel, substitute: TrainedModel,
                oracle: OracleHandle, out: Path) -> dict:
    """White-box reference sweep on the victim, then the substitute-sourced transfer sweep."""
    ev = cfg.evasion
    kwargs = dict(damage_threshold=ev.damage_threshold, metric=ev.metric, k=ev.topk, iou_threshold=ev.iou_threshold)
    whitebox = epsilon_sweep(victim, victim, sc.test, ev.epsilons, source_name="victim_whitebox", **kwargs)
    transfer = epsilon_sweep(substitute, oracle.evaluation_view(), sc.test, ev.epsilons,
                             source_name="substitute", **kwargs)
    payload = evasion_payload(whitebox, transfer, victim, substitute)
    write_json(out / EVASION_FILE, payload)
    return payload


def evasion_payload(whitebox: SweepResult, transfer: SweepResult, victim: TrainedModel,
                    substitute: TrainedModel) -> dict:
    return {
        "whitebox": [r.to_dict() for r in whitebox.reports],
        "transfer": [r.to_dict() for r in transfer.reports],
        "damage_threshold": whitebox.damage_threshold,
        "minimal_epsilon": {"whitebox": whitebox.minimal_epsilon, "transfer": transfer.minimal_epsilon},
        "epsilon_gap": epsilon_gap(whitebox, transfer),
        "victim_hash": victim.fingerprint(),
        "substitute_hash": substitute.fingerprint(),
    }


# --------------------------------------------------------------------- report


def assemble_report(cfg: RunConfig, victim_info: dict, extraction: dict, evasion: dict, timings: dict) -> dict:
    return {
        "version": REPORT_VERSION,
        "config_hash": cfg.config_hash(),
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "model_format_version": FORMAT_VERSION,
        "victim": victim_info,
        "extraction": extraction,
        "evasion": evasion,
        "timings": timings,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "environment": {"python": platform.python_version(), "numpy": np.__version__},
    }


def report_body(report: dict) -> dict:
    """The deterministic part of a report (timestamps and timings removed)."""
    return {k: v for k, v in report.items() if k not in VOLATILE_KEYS}


# ------------------------------------------------------------------- helpers


def write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def read_json(path: Path) -> dict:
    if not path.is_file():
        raise ArtifactMissing(f"expected artifact {path} does not exist")
    return json.loads(path.read_text())


def require_model(path: Path) -> TrainedModel:
    if not path.is_file():
        raise ArtifactMissing(f"expected model file {path} does not exist")
    return load_model(path)


@dataclass
class StageClock:
    timings: dict = field(default_factory=dict)

    def run(self, stage: str, fn, *args, **kwargs):
        start = time.perf_counter()
        log.info("stage %s: start", stage)
        try:
            result = fn(*args, **kwargs)
        except Exception as exc:
            raise StageError(stage, exc) from exc
        self.timings[stage] = round(time.perf_counter() - start, 3)
        log.info("stage %s: done in %.1fs", stage, self.timings[stage])
        return result


def predict_labels(m: TrainedModel, images: np.ndarray) -> np.ndarray:
    return predict(m, images).argmax(axis=1)
