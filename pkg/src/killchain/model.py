"""Differentiable classifiers and box localizers.

Models are small CNNs built from an :class:`ArchitectureSpec`. A
:class:`TrainedModel` keeps its weights as one flat float32 vector plus a
layout map; the torch module behind it is rebuilt on demand and never
mutated, so prediction and gradient calls are safe to share.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import LabeledDataset, validate_batch
from .metrics import iou_arrays

FORMAT_VERSION = 1
MAGIC = b"KCMODEL\x00"
BOX_MIN_SIDE = 1e-3

ACTIVATIONS = {"softplus": nn.Softplus, "tanh": nn.Tanh, "relu": nn.ReLU}


class ModelFormatError(Exception):
    """A model file is corrupt or does not match the expected layout."""


@dataclass(frozen=True)
class ConvBlock:
    filters: int
    kernel: int = 3
    activation: str = "softplus"
    pool: int = 2


@dataclass(frozen=True)
class ArchitectureSpec:
    kind: str  # "classifier" | "localizer"
    input_shape: tuple[int, int, int]
    conv_blocks: tuple[ConvBlock, ...] = ()
    dense: tuple[int, ...] = (64,)
    output_dim: int = 10
    activation: str = "softplus"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_blocks", tuple(
            b if isinstance(b, ConvBlock) else ConvBlock(**b) for b in self.conv_blocks))
        object.__setattr__(self, "dense", tuple(int(d) for d in self.dense))
        if self.kind not in ("classifier", "localizer"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "localizer" and self.output_dim != 4:
            raise ValueError("localizers output exactly 4 values")
        if self.kind == "classifier" and self.output_dim < 2:
            raise ValueError("classifier needs at least two classes")
        for name in [self.activation] + [b.activation for b in self.conv_blocks]:
            if name not in ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")

    @classmethod
    def classifier(cls, input_shape, num_classes: int, filters: Sequence[int] = (16, 32),
                   dense: Sequence[int] = (64,), kernel: int = 3, activation: str = "softplus") -> "ArchitectureSpec":
        blocks = tuple(ConvBlock(f, kernel, activation) for f in filters)
        return cls("classifier", tuple(input_shape), blocks, tuple(dense), num_classes, activation)

    @classmethod
    def localizer(cls, input_shape, filters: Sequence[int] = (16, 32, 32), dense: Sequence[int] = (64,),
                  kernel: int = 3, activation: str = "softplus") -> "ArchitectureSpec":
        blocks = tuple(ConvBlock(f, kernel, activation) for f in filters)
        return cls("localizer", tuple(input_shape), blocks, tuple(dense), 4, activation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["dense"] = list(self.dense)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        d["conv_blocks"] = tuple(ConvBlock(**b) for b in d.get("conv_blocks", ()))
        return cls(**d)

    @property
    def default_loss(self) -> str:
        return "cross_entropy" if self.kind == "classifier" else "box_mse"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.05
    seed: int = 0
    loss: str | None = None  # None: cross-entropy for classifiers, box MSE for localizers
    momentum: float = 0.0
    optimizer: str = "sgd"  # "sgd" (with optional momentum) | "adam"
    temperature: float = 1.0  # softens probability-row targets and the matching logits

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("need epochs >= 1, batch_size >= 1 and learning_rate > 0")
        if self.loss not in (None, "cross_entropy", "box_mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Net(nn.Module):
    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        h, w, c = spec.input_shape
        layers: list[nn.Module] = []
        for block in spec.conv_blocks:
            layers.append(nn.Conv2d(c, block.filters, block.kernel, padding=block.kernel // 2))
            layers.append(ACTIVATIONS[block.activation]())
            if block.pool > 1:
                layers.append(nn.AvgPool2d(block.pool))
                h, w = h // block.pool, w // block.pool
            c = block.filters
        self.features = nn.Sequential(*layers)
        width = c * h * w
        head: list[nn.Module] = []
        for d in spec.dense:
            head += [nn.Linear(width, d), ACTIVATIONS[spec.activation]()]
            width = d
        head.append(nn.Linear(width, spec.output_dim))
        self.head = nn.Sequential(*head)
        self.kind = spec.kind

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x arrives as (N, H, W, C) in [0, 1]
        z = self.features(x.permute(0, 3, 1, 2))
        return self.head(z.flatten(1))


def squash_box(raw: torch.Tensor) -> torch.Tensor:
    """Map raw (cx, cy, w, h) activations to valid normalized corners.

    Side lengths lie in (BOX_MIN_SIDE, 1) and the offset places the box
    inside the unit square, so x_min < x_max and y_min < y_max always hold.
    """
    side = BOX_MIN_SIDE + (1.0 - BOX_MIN_SIDE) * torch.sigmoid(raw[:, 2:4])
    lo = (1.0 - side) * torch.sigmoid(raw[:, 0:2])
    hi = torch.clamp(lo + side, max=1.0)
    return torch.stack([lo[:, 0], lo[:, 1], hi[:, 0], hi[:, 1]], dim=1)


def _layout(net: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    return [(name, tuple(p.shape)) for name, p in net.named_parameters()]


def _flatten(net: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1) for p in net.parameters()]).cpu().numpy().astype(np.float32)


def _load_flat(net: nn.Module, flat: np.ndarray) -> None:
    offset = 0
    with torch.no_grad():
        for p in net.parameters():
            n = p.numel()
            p.copy_(torch.tensor(flat[offset:offset + n]).reshape(p.shape))
            offset += n


@dataclass(frozen=True)
class TrainedModel:
    spec: ArchitectureSpec
    params: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]
    history: tuple[dict, ...] = ()
    initial_loss: float | None = None
    _modules: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float32).reshape(-1).copy()
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "layout", tuple((n, tuple(s)) for n, s in self.layout))
        expected = sum(math.prod(s) for _, s in self.layout)
        if expected != params.size:
            raise ModelFormatError(f"param_count: layout needs {expected} values, got {params.size}")

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def param_count(self) -> int:
        return int(self.params.size)

    def module(self, dtype: torch.dtype = torch.float32) -> Net:
        net = self._modules.get(dtype)
        if net is None:
            net = Net(self.spec)
            if _layout(net) != list(self.layout):
                raise ModelFormatError("layout: stored layout does not match the architecture")
            _load_flat(net, self.params)
            net = net.to(dtype)
            net.requires_grad_(False)
            net.eval()
            self._modules[dtype] = net
        return net

    def with_params(self, params: np.ndarray) -> "TrainedModel":
        return TrainedModel(self.spec, params, self.layout)

    def layer_slice(self, name: str) -> slice:
        offset = 0
        for n, shape in self.layout:
            size = math.prod(shape)
            if n == name:
                return slice(offset, offset + size)
            offset += size
        raise KeyError(name)

    def fingerprint(self) -> str:
        """sha256 over the architecture and the raw parameter bytes."""
        h = hashlib.sha256(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        h.update(self.params.astype("<f4").tobytes())
        return h.hexdigest()


def init_model(spec: ArchitectureSpec, seed: int = 0) -> TrainedModel:
    """An untrained model with seeded default initialization."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = Net(spec)
    return TrainedModel(spec, _flatten(net), _layout(net))


# ---------------------------------------------------------------------- losses


def _outputs(net: Net, x: torch.Tensor) -> torch.Tensor:
    raw = net(x)
    return squash_box(raw) if net.kind == "localizer" else raw


def _per_example_loss(net: Net, x: torch.Tensor, target: torch.Tensor, loss: str,
                      temperature: float = 1.0) -> torch.Tensor:
    out = _outputs(net, x)
    if loss == "cross_entropy":
        if net.kind != "classifier":
            raise ValueError("cross_entropy needs a classifier")
        if target.dim() == 1:
            logp = F.log_softmax(out, dim=1)
            return -logp.gather(1, target.long()[:, None])[:, 0]
        logp = F.log_softmax(out / temperature, dim=1)
        return -(target * logp).sum(dim=1)
    if loss == "box_mse":
        if net.kind != "localizer":
            raise ValueError("box_mse needs a localizer")
        return ((out - target) ** 2).mean(dim=1)
    raise ValueError(f"unknown loss {loss!r}")


def _as_targets(kind: str, targets) -> np.ndarray:
    t = np.asarray(targets)
    if kind == "classifier":
        if t.ndim == 1:
            if not np.issubdtype(t.dtype, np.integer):
                raise ValueError("classifier targets must be class ids or probability rows")
            return t.astype(np.int64)
        if t.ndim == 2:
            return t.astype(np.float32)
    elif t.ndim == 2 and t.shape[1] == 4:
        return t.astype(np.float32)
    raise ValueError(f"targets of shape {t.shape} do not fit a {kind}")


# -------------------------------------------------------------------- training


def fit(spec: ArchitectureSpec, images: np.ndarray, targets, cfg: TrainConfig) -> TrainedModel:
    """Minibatch gradient descent on arbitrary targets.

    Classifier targets may be class ids or probability rows (soft labels);
    localizer targets are (N, 4) box corners.
    """
    images = validate_batch(images, spec.input_shape)
    targets = _as_targets(spec.kind, targets)
    n = len(images)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(targets) != n:
        raise ValueError(f"{n} images but {len(targets)} targets")
    if spec.kind == "classifier" and targets.ndim == 2:
        if targets.shape[1] != spec.output_dim:
            raise ValueError(f"soft targets have {targets.shape[1]} classes, spec has {spec.output_dim}")
        if cfg.temperature != 1.0:
            targets = soften(targets, cfg.temperature)
    loss_name = cfg.loss or spec.default_loss

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = Net(spec)
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    else:
        opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    x_all = torch.tensor(images)
    y_all = torch.tensor(targets)

    with torch.no_grad():
        probe = slice(0, min(n, 1024))
        initial = float(_per_example_loss(net, x_all[probe], y_all[probe], loss_name, cfg.temperature).mean())

    history = []
    for epoch in range(cfg.epochs):
        order = torch.from_numpy(rng.permutation(n))
        total, hits = 0.0, 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            opt.zero_grad(set_to_none=True)
            per = _per_example_loss(net, xb, yb, loss_name, cfg.temperature)
            per.mean().backward()
            opt.step()
            total += float(per.detach().sum())
            hits += _batch_metric(net, xb, yb)
        history.append({"epoch": epoch + 1, "loss": total / n, "metric": hits / n})

    net.eval()
    return TrainedModel(spec, _flatten(net), _layout(net), tuple(history), initial)


def _batch_metric(net: Net, xb: torch.Tensor, yb: torch.Tensor) -> float:
    """Sum of per-example accuracy (classifier) or IOU (localizer) for a batch, no grad."""
    with torch.no_grad():
        out = _outputs(net, xb)
        if net.kind == "classifier":
            truth = yb if yb.dim() == 1 else yb.argmax(dim=1)
            return float((out.argmax(dim=1) == truth).sum())
        return float(iou_arrays(out.numpy(), yb.numpy()).sum())


def soften(probs: np.ndarray, temperature: float, floor: float = 1e-30) -> np.ndarray:
    """Temperature-scaled probability rows, ``p ** (1/T)`` renormalized."""
    logp = np.log(np.maximum(probs.astype(np.float64), floor)) / temperature
    logp -= logp.max(axis=1, keepdims=True)
    q = np.exp(logp)
    return (q / q.sum(axis=1, keepdims=True)).astype(np.float32)


def train(spec: ArchitectureSpec, data: LabeledDataset, cfg: TrainConfig) -> TrainedModel:
    """Train a model on a labeled dataset (class ids or ground-truth boxes)."""
    expected = "classification" if spec.kind == "classifier" else "localization"
    if data.kind != expected:
        raise ValueError(f"a {spec.kind} cannot be trained on a {data.kind} dataset")
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if spec.kind == "classifier" and data.num_classes != spec.output_dim:
        raise ValueError(f"dataset has {data.num_classes} classes, spec outputs {spec.output_dim}")
    return fit(spec, data.images, data.labels, cfg)


# ------------------------------------------------------------------ inference


def predict(m: TrainedModel, batch, batch_size: int = 1024) -> np.ndarray:
    """Class probabilities ``(N, K)`` or box corners ``(N, 4)`` for a batch."""
    x = validate_batch(batch, m.spec.input_shape)
    net = m.module()
    outs = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            out = _outputs(net, torch.tensor(x[start:start + batch_size]))
            if m.kind == "classifier":
                out = torch.softmax(out, dim=1)
            outs.append(out.numpy())
    if not outs:
        return np.zeros((0, m.spec.output_dim), np.float32)
    return np.concatenate(outs).astype(np.float32)


def input_gradient(m: TrainedModel, x, target, loss_scale: float = 1.0,
                   dtype: torch.dtype = torch.float32) -> np.ndarray:
    """Gradient of the training loss with respect to the input pixels.

    ``x`` is one image ``(H, W, C)`` or a batch; for a batch the result
    holds each example's own gradient. ``loss_scale`` multiplies the loss.
    """
    single = np.ndim(x) == 3
    xb = validate_batch(x, m.spec.input_shape)
    if dtype == torch.float64:  # keep full precision for finite-difference checks
        xb = np.asarray(x, np.float64).reshape(xb.shape)
    t = np.asarray(target)
    if single:
        t = t[None]
    if m.kind == "classifier":
        if t.ndim != 1 or not np.issubdtype(t.dtype, np.integer):
            raise ValueError("classifier gradients need an integer class target")
    elif t.ndim != 2 or t.shape[1] != 4:
        raise ValueError("localizer gradients need a box target")
    if len(t) != len(xb):
        raise ValueError(f"{len(xb)} inputs but {len(t)} targets")
    net = m.module(dtype)
    xt = torch.tensor(xb).to(dtype).requires_grad_(True)
    tt = torch.tensor(t.astype(np.int64) if m.kind == "classifier" else t).to(
        torch.int64 if m.kind == "classifier" else dtype)
    loss = _per_example_loss(net, xt, tt, m.spec.default_loss).sum() * loss_scale
    (grad,) = torch.autograd.grad(loss, xt)
    out = grad.detach().numpy()
    out = out.astype(np.float64 if dtype == torch.float64 else np.float32)
    return out[0] if single else out


def loss_value(m: TrainedModel, x, target, dtype: torch.dtype = torch.float64) -> float:
    """Summed training loss at ``x``; used by finite-difference checks."""
    xb = validate_batch(x, m.spec.input_shape) if dtype == torch.float32 else np.asarray(x, np.float64)
    if xb.ndim == 3:
        xb = xb[None]
    t = np.atleast_1d(np.asarray(target)) if m.kind == "classifier" else np.asarray(target).reshape(-1, 4)
    net = m.module(dtype)
    with torch.no_grad():
        tt = torch.tensor(t.astype(np.int64)) if m.kind == "classifier" else torch.tensor(t).to(dtype)
        return float(_per_example_loss(net, torch.tensor(xb).to(dtype), tt, m.spec.default_loss).sum())


# ---------------------------------------------------------------- persistence


def save_model(m: TrainedModel, path) -> Path:
    """Write ``MAGIC | u64 header length | JSON header | little-endian float32 params``."""
    path = Path(path)
    header = {
        "format_version": FORMAT_VERSION,
        "spec": m.spec.to_dict(),
        "param_count": m.param_count,
        "layout": [[n, list(s)] for n, s in m.layout],
        "history": list(m.history),
        "initial_loss": m.initial_loss,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(m.params.astype("<f4").tobytes())
    return path


def read_header(path) -> tuple[dict, int]:
    """Parse a model file header; returns (header, payload offset)."""
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 8)
        if len(head) < len(MAGIC) + 8 or head[:len(MAGIC)] != MAGIC:
            raise ModelFormatError(f"magic: {path} is not a model file")
        (size,) = struct.unpack("<Q", head[len(MAGIC):])
        raw = fh.read(size)
    if len(raw) != size:
        raise ModelFormatError("header: truncated header")
    try:
        header = json.loads(raw.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"header: not valid JSON ({exc})") from None
    return header, len(MAGIC) + 8 + size


def load_model(path) -> TrainedModel:
    path = Path(path)
    header, offset = read_header(path)
    for key in ("format_version", "spec", "param_count", "layout"):
        if key not in header:
            raise ModelFormatError(f"{key}: missing from header")
    if header["format_version"] != FORMAT_VERSION:
        raise ModelFormatError(f"format_version: expected {FORMAT_VERSION}, got {header['format_version']}")
    try:
        spec = ArchitectureSpec.from_dict(header["spec"])
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"spec: {exc}") from None
    payload = path.read_bytes()[offset:]
    count = int(header["param_count"])
    if len(payload) != 4 * count:
        raise ModelFormatError(f"param_count: header says {count} values, payload holds {len(payload) / 4:g}")
    params = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    layout = tuple((n, tuple(s)) for n, s in header["layout"])
    if _layout(Net(spec)) != list(layout):
        raise ModelFormatError("layout: does not match the architecture in spec")
    return TrainedModel(spec, params, layout, tuple(header.get("history", ())), header.get("initial_loss"))
