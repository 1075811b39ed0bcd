"""Model extraction: harvest a labeled query transcript and fit a substitute."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import LabeledDataset, load_images, save_images, validate_batch
from .metrics import agreement_rate, argmax_labels, iou_arrays, topk_accuracy
from .model import ArchitectureSpec, TrainConfig, TrainedModel, fit, predict
from .oracle import BudgetExhausted, OracleHandle
from .querygen import QueryStrategy

QUERY_CHUNK = 1024


@dataclass(frozen=True)
class LLDS:
    """Learned labeled dataset: queries paired with what the oracle said."""

    images: np.ndarray
    outputs: np.ndarray
    label_mode: str
    provenance: np.ndarray
    queries_spent: int

    def __post_init__(self):
        if not (len(self.images) == len(self.outputs) == len(self.provenance) == self.queries_spent):
            raise ValueError("LLDS pairs, provenance and queries_spent disagree")
        if self.label_mode == "soft" and len(self.outputs):
            if np.abs(self.outputs.sum(axis=1) - 1.0).max() > 1e-5 or self.outputs.min() < 0:
                raise ValueError("soft outputs must be probability rows")

    def __len__(self) -> int:
        return self.queries_spent

    def prefix(self, n: int) -> "LLDS":
        return LLDS(self.images[:n], self.outputs[:n], self.label_mode, self.provenance[:n], min(n, len(self)))

    def save(self, directory) -> Path:
        directory = Path(directory)
        save_images(self.images, directory / "images", labels=self.provenance,
                    extra={"label_mode": self.label_mode, "queries_spent": self.queries_spent})
        np.save(directory / "outputs.npy", self.outputs)
        # PNG quantizes pixels; keep the exact queries next to them
        np.save(directory / "images.npy", self.images)
        return directory

    @classmethod
    def load(cls, directory) -> "LLDS":
        directory = Path(directory)
        exact = directory / "images.npy"
        _, prov, index = load_images(directory / "images")
        images = np.load(exact) if exact.is_file() else load_images(directory / "images")[0]
        return cls(images, np.load(directory / "outputs.npy"), index["label_mode"],
                   np.asarray(prov), int(index["queries_spent"]))


def build_llds(o: OracleHandle, queries, provenance=None) -> LLDS:
    """Spend ``len(queries)`` budget to label every query, order preserved."""
    x = validate_batch(queries)
    n = len(x)
    if n > o.budget.remaining:
        raise BudgetExhausted(f"{n} queries exceed remaining budget {o.budget.remaining:g}")
    outs = [o.query(x[s:s + QUERY_CHUNK]) for s in range(0, n, QUERY_CHUNK)]
    prov = np.asarray(provenance) if provenance is not None else np.full(n, "query")
    return LLDS(x, np.concatenate(outs), o.label_mode, prov, n)


def _check_mode(llds: LLDS, spec: ArchitectureSpec) -> None:
    wants = "localizer" if llds.label_mode == "box" else "classifier"
    if spec.kind != wants:
        raise ValueError(f"{llds.label_mode!r} labels need a {wants}, spec is a {spec.kind}")


def train_substitute(llds: LLDS, spec: ArchitectureSpec, cfg: TrainConfig) -> TrainedModel:
    """Fit a substitute to the transcript alone; the oracle is not touched.

    Soft transcripts train against the probability rows, hard transcripts
    against one-hot labels, box transcripts with box regression.
    """
    if len(llds) == 0:
        raise ValueError("LLDS is empty")
    _check_mode(llds, spec)
    if llds.label_mode == "hard":
        targets = np.asarray(llds.outputs, dtype=np.int64)
    else:
        targets = np.asarray(llds.outputs, dtype=np.float32)
    return fit(spec, llds.images, targets, cfg)


def fidelity(substitute: TrainedModel, o: OracleHandle, eval_images, exempt: bool = True) -> float:
    """Agreement with the victim (classifiers) or mean substitute/victim box IOU."""
    x = validate_batch(eval_images)
    victim = np.concatenate([o.query(x[s:s + QUERY_CHUNK], exempt=exempt) for s in range(0, len(x), QUERY_CHUNK)])
    mine = predict(substitute, x)
    if substitute.kind == "localizer":
        return float(np.clip(iou_arrays(mine, victim).mean(), 0.0, 1.0))
    theirs = victim if victim.ndim == 1 else argmax_labels(victim)
    return agreement_rate(argmax_labels(mine), theirs)


def task_metrics(m: TrainedModel, eval_set: LabeledDataset, k: int = 5) -> dict:
    """Ground-truth quality: top-1/top-k accuracy, or mean IOU for localizers."""
    out = predict(m, eval_set.images)
    if m.kind == "localizer":
        return {"mean_iou": float(iou_arrays(out, eval_set.labels).mean())}
    k = min(k, out.shape[1])
    return {"accuracy": topk_accuracy(out, eval_set.labels, 1),
            f"top{k}_accuracy": topk_accuracy(out, eval_set.labels, k)}


@dataclass
class CheckpointResult:
    budget: int
    fidelity: float
    task_metric: float
    metrics: dict = field(default_factory=dict)


@dataclass
class ExtractionReport:
    strategy: str
    label_mode: str
    budget_spent: int
    task_metric_name: str
    fidelity_name: str
    eval_exempt: bool
    checkpoints: list[CheckpointResult]
    provenance_counts: dict = field(default_factory=dict)
    substitute_hash: str = ""

    @property
    def final(self) -> CheckpointResult:
        return self.checkpoints[-1]

    def validate(self) -> "ExtractionReport":
        for cp in self.checkpoints:
            for name, v in [("fidelity", cp.fidelity), ("task_metric", cp.task_metric), *cp.metrics.items()]:
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"extraction metric {name}={v} at budget {cp.budget} outside [0, 1]")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractionReport":
        d = dict(d)
        d["checkpoints"] = [CheckpointResult(**c) for c in d["checkpoints"]]
        return cls(**d).validate()


def epochs_for(n: int, cfg: TrainConfig, min_steps: int) -> int:
    """Epoch count giving at least ``min_steps`` optimizer steps on ``n`` examples."""
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    return max(cfg.epochs, math.ceil(min_steps / steps_per_epoch))


def extract(o: OracleHandle, strategy: QueryStrategy, budget: int, spec: ArchitectureSpec, cfg: TrainConfig,
            eval_set: LabeledDataset, checkpoints=None, public_data: LabeledDataset | None = None,
            min_steps: int = 0, eval_exempt: bool = True, topk: int = 5,
            ) -> tuple[TrainedModel, ExtractionReport]:
    """Full extraction run with a fidelity-versus-budget curve.

    One query set of size ``budget`` is generated and labeled; each
    checkpoint ``b`` retrains a fresh substitute on the first ``b`` pairs
    (seed ``cfg.seed + i``) and scores it on ``eval_set``. Evaluation
    queries are budget-exempt unless ``eval_exempt`` is False. Returns the
    substitute at the last checkpoint.
    """
    checkpoints = list(checkpoints or [budget])
    if checkpoints != sorted(checkpoints) or checkpoints[-1] != budget or checkpoints[0] < 1:
        raise ValueError("checkpoints must be ascending, positive and end at the budget")
    if budget > o.budget.remaining:
        raise BudgetExhausted(f"budget {budget} exceeds oracle remaining {o.budget.remaining:g}")
    queries, prov = strategy.generate(budget, spec.input_shape, public_data)
    llds = build_llds(o, queries, prov)

    results, model = [], None
    for i, b in enumerate(checkpoints):
        part = llds.prefix(b)
        ccfg = replace(cfg, seed=cfg.seed + i, epochs=epochs_for(b, cfg, min_steps))
        model = train_substitute(part, spec, ccfg)
        metrics = task_metrics(model, eval_set, topk)
        task_name = "mean_iou" if spec.kind == "localizer" else f"top{min(topk, spec.output_dim)}_accuracy"
        fid = fidelity(model, o, eval_set.images, exempt=eval_exempt)
        results.append(CheckpointResult(b, fid, metrics[task_name], metrics))

    names, counts = np.unique(llds.provenance, return_counts=True)
    report = ExtractionReport(
        strategy=strategy.kind,
        label_mode=llds.label_mode,
        budget_spent=llds.queries_spent,
        task_metric_name=task_name,
        fidelity_name="mean_iou_vs_victim" if spec.kind == "localizer" else "agreement",
        eval_exempt=eval_exempt,
        checkpoints=results,
        provenance_counts={str(k): int(v) for k, v in zip(names, counts)},
        substitute_hash=model.fingerprint(),
    )
    return model, report.validate()


def save_report(report: ExtractionReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return path
