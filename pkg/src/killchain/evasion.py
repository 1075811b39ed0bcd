"""FGSM crafting and evasion/transfer measurement."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .data import LabeledDataset, save_images, validate_batch
from .metrics import iou_arrays, rank_classes
from .model import TrainedModel, input_gradient, predict
from .oracle import OracleHandle

Target = Union[TrainedModel, OracleHandle]
METRICS = ("accuracy", "topk", "iou")
GRAD_CHUNK = 512


def _step(x: np.ndarray, direction: np.ndarray, epsilon: float) -> np.ndarray:
    """``clip(x + epsilon * direction, 0, 1)`` rounded to float32 without leaving the epsilon ball."""
    x64 = x.astype(np.float64)
    # float64 direction too: a float32 one would round epsilon itself to float32
    y = np.clip(x64 + epsilon * direction.astype(np.float64), 0.0, 1.0).astype(np.float32)
    # float32 rounding can land one ulp outside the ball; pull those back toward x
    over = np.abs(y.astype(np.float64) - x64) > epsilon
    if over.any():
        y[over] = np.nextafter(y[over], x[over])
    return y


def gradient_sign(m: TrainedModel, x, target, loss_scale: float = 1.0) -> np.ndarray:
    xb = validate_batch(x, m.spec.input_shape)
    t = np.asarray(target)
    out = np.empty_like(xb)
    for s in range(0, len(xb), GRAD_CHUNK):
        out[s:s + GRAD_CHUNK] = np.sign(input_gradient(m, xb[s:s + GRAD_CHUNK], t[s:s + GRAD_CHUNK], loss_scale))
    return out


def fgsm(m: TrainedModel, x, target, epsilon: float, loss_scale: float = 1.0) -> np.ndarray:
    """Untargeted FGSM: one signed-gradient step of size ``epsilon`` that raises the loss.

    Works on one image with its target or on a batch with aligned targets.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    single = np.ndim(x) == 3
    xb = validate_batch(x, m.spec.input_shape)
    t = np.asarray(target)
    if single:
        t = t[None]
    adv = _step(xb, gradient_sign(m, xb, t, loss_scale), epsilon)
    return adv[0] if single else adv


@dataclass
class TransferReport:
    source: str
    metric: str
    epsilon: float
    clean_metric: float
    adversarial_metric: float
    source_adversarial_metric: float | None
    success_rate: float
    n: int
    extra: dict = field(default_factory=dict)

    def validate(self) -> "TransferReport":
        for name in ("clean_metric", "adversarial_metric", "source_adversarial_metric", "success_rate"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"evasion metric {name}={v} outside [0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon {self.epsilon} outside [0, 1]")
        return self

    @property
    def damage(self) -> float:
        """Relative metric loss on the target, ``1 - adversarial / clean``."""
        if self.clean_metric <= 0:
            return 0.0
        return max(0.0, 1.0 - self.adversarial_metric / self.clean_metric)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransferReport":
        return cls(**d).validate()


def _outputs(target: Target, x: np.ndarray) -> np.ndarray:
    if isinstance(target, OracleHandle):
        return np.concatenate([target.query(x[s:s + 1024], exempt=True) for s in range(0, len(x), 1024)])
    return predict(target, x)


def _correct(out: np.ndarray, labels: np.ndarray, metric: str, k: int, iou_threshold: float):
    """Per-example correctness and the per-example score that feeds the metric."""
    if metric == "iou":
        scores = iou_arrays(out, labels)
        return scores >= iou_threshold, scores
    if out.ndim == 1:  # hard-label oracle
        if metric == "topk":
            raise ValueError("top-k needs scores; the target only returns hard labels")
        hit = out == labels
    elif metric == "topk":
        hit = (rank_classes(out)[:, :k] == labels[:, None]).any(axis=1)
    else:
        hit = np.argmax(out, axis=1) == labels
    return hit, hit.astype(np.float64)


def evaluate_evasion(target: Target, adversarials, originals, labels, metric: str = "accuracy", k: int = 5,
                     iou_threshold: float = 0.5, source: str = "unknown", epsilon: float = 0.0,
                     source_model: TrainedModel | None = None) -> TransferReport:
    """Clean vs adversarial quality on ``target`` plus the flip rate.

    ``success_rate`` counts initially-correct examples that the adversarial
    version gets wrong; for localizers an example is correct while
    ``iou(pred, truth) >= iou_threshold`` and the metric is mean IOU.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    adv = validate_batch(adversarials)
    orig = validate_batch(originals)
    labels = np.asarray(labels)
    if not len(adv) == len(orig) == len(labels):
        raise ValueError(f"length mismatch: {len(adv)} adversarials, {len(orig)} originals, {len(labels)} labels")
    clean_ok, clean_score = _correct(_outputs(target, orig), labels, metric, k, iou_threshold)
    adv_ok, adv_score = _correct(_outputs(target, adv), labels, metric, k, iou_threshold)
    src_metric = None
    if source_model is not None:
        src_metric = float(_correct(predict(source_model, adv), labels, metric, k, iou_threshold)[1].mean())
    n_ok = int(clean_ok.sum())
    success = float((clean_ok & ~adv_ok).sum() / n_ok) if n_ok else 0.0
    extra = {}
    if metric == "iou":
        extra = {"clean_hit_rate": float(clean_ok.mean()), "adversarial_hit_rate": float(adv_ok.mean())}
    return TransferReport(source, metric, float(epsilon), float(clean_score.mean()), float(adv_score.mean()),
                          src_metric, success, len(labels), extra).validate()


def _default_metric(m: TrainedModel) -> str:
    return "iou" if m.kind == "localizer" else "accuracy"


def transfer_attack(substitute: TrainedModel, victim: OracleHandle, eval_set: LabeledDataset, epsilon: float,
                    metric: str | None = None, k: int = 5, iou_threshold: float = 0.5,
                    source: str = "substitute") -> TransferReport:
    """Craft on the substitute's gradients, score on the victim through its oracle."""
    if tuple(substitute.spec.input_shape) != tuple(eval_set.image_shape):
        raise ValueError("substitute and evaluation images differ in shape")
    adv = fgsm(substitute, eval_set.images, eval_set.labels, epsilon)
    return evaluate_evasion(victim, adv, eval_set.images, eval_set.labels, metric or _default_metric(substitute),
                            k, iou_threshold, source, epsilon, substitute)


@dataclass
class SweepResult:
    reports: list[TransferReport]
    damage_threshold: float
    minimal_epsilon: float | None

    def to_dict(self) -> dict:
        return {"reports": [r.to_dict() for r in self.reports], "damage_threshold": self.damage_threshold,
                "minimal_epsilon": self.minimal_epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepResult":
        return cls([TransferReport.from_dict(r) for r in d["reports"]], d["damage_threshold"], d["minimal_epsilon"])


def epsilon_sweep(source: TrainedModel, target: Target, eval_set: LabeledDataset, epsilons: Sequence[float],
                  damage_threshold: float = 0.5, metric: str | None = None, k: int = 5,
                  iou_threshold: float = 0.5, source_name: str = "source") -> SweepResult:
    """One report per epsilon, crafted on ``source`` and scored on ``target``.

    ``minimal_epsilon`` is the smallest swept epsilon whose relative damage
    on the target reaches ``damage_threshold`` (None if none does).
    """
    eps = [float(e) for e in epsilons]
    if eps != sorted(eps):
        raise ValueError("epsilons must be sorted ascending")
    metric = metric or _default_metric(source)
    x, y = eval_set.images, eval_set.labels
    direction = gradient_sign(source, x, y)  # independent of epsilon
    reports = []
    for e in eps:
        adv = _step(x, direction, e)
        reports.append(evaluate_evasion(target, adv, x, y, metric, k, iou_threshold, source_name, e, source))
    minimal = next((r.epsilon for r in reports if r.damage >= damage_threshold and r.epsilon > 0), None)
    return SweepResult(reports, damage_threshold, minimal)


def epsilon_gap(whitebox: SweepResult, transfer: SweepResult) -> float | None:
    """Transfer minimal epsilon minus white-box minimal epsilon (None if either never reaches the threshold)."""
    if whitebox.minimal_epsilon is None or transfer.minimal_epsilon is None:
        return None
    return round(transfer.minimal_epsilon - whitebox.minimal_epsilon, 10)


def save_adversarials(images: np.ndarray, directory, epsilon: float, source_hash: str, labels=None) -> Path:
    return save_images(images, directory, labels=labels, extra={"epsilon": epsilon, "source_hash": source_hash})
