"""Domain types and dataset ingestion.

Images travel through the toolkit as float32 numpy arrays in ``(H, W, C)``
layout with values in ``[0, 1]``; batches stack them to ``(N, H, W, C)``.
Boxes are normalized corner coordinates.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage

GTSRB_COLUMNS = ["Filename", "Width", "Height", "Roi.X1", "Roi.Y1", "Roi.X2", "Roi.Y2", "ClassId"]
GTSRB_NUM_CLASSES = 43
# default desk subset: a spread of sign families (speed limits, prohibitory,
# priority, yield, stop, no entry, warning, mandatory)
DEFAULT_TSR_CLASSES = (1, 2, 4, 10, 12, 13, 14, 17, 25, 38)


class IngestionError(Exception):
    """Raised when a dataset directory or annotation file cannot be read."""


def validate_image(x: np.ndarray) -> np.ndarray:
    """Check the Image invariant and return the array as float32."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3 or x.shape[2] not in (1, 2, 3):
        raise ValueError(f"image must be (h, w, c) with c in {{1, 2, 3}}, got {x.shape}")
    if x.size and (np.isnan(x).any() or x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("image pixels must lie in [0, 1]")
    return x


def validate_batch(batch: np.ndarray, shape: Sequence[int] | None = None) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim == 3:
        batch = batch[None]
    if batch.ndim != 4:
        raise ValueError(f"image batch must be (n, h, w, c), got shape {batch.shape}")
    if shape is not None and tuple(batch.shape[1:]) != tuple(shape):
        raise ValueError(f"image shape {tuple(batch.shape[1:])} does not match expected {tuple(shape)}")
    if batch.size and (np.isnan(batch).any() or batch.min() < 0.0 or batch.max() > 1.0):
        raise ValueError("image pixels must lie in [0, 1]")
    return batch


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (0.0 <= self.x_min < self.x_max <= 1.0 and 0.0 <= self.y_min < self.y_max <= 1.0):
            raise ValueError(f"invalid box {self.as_tuple()}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_array(cls, arr) -> "BoundingBox":
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class LabeledDataset:
    """Images with homogeneous labels.

    ``labels`` is an int array of class ids for classification datasets and a
    ``(N, 4)`` float array of box corners for localization datasets.
    ``groups`` optionally tags each example with a source group (a GTSRB
    track, say) so splits can keep groups intact.
    """

    images: np.ndarray
    labels: np.ndarray
    kind: str  # "classification" | "localization"
    num_classes: int | None = None
    split: str = "train"
    groups: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        images = validate_batch(self.images) if len(self.images) else np.asarray(self.images, np.float32)
        object.__setattr__(self, "images", images)
        if self.kind == "classification":
            labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.num_classes is None or self.num_classes < 1:
                raise ValueError("classification datasets need num_classes >= 1")
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ValueError("class id out of range")
        elif self.kind == "localization":
            labels = np.asarray(self.labels, dtype=np.float32).reshape(-1, 4)
            bad = ~((labels[:, 0] >= 0) & (labels[:, 0] < labels[:, 2]) & (labels[:, 2] <= 1)
                    & (labels[:, 1] >= 0) & (labels[:, 1] < labels[:, 3]) & (labels[:, 3] <= 1))
            if bad.any():
                raise ValueError(f"invalid box label at index {int(np.argmax(bad))}")
        else:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if len(labels) != len(images):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        object.__setattr__(self, "labels", labels)
        images.setflags(write=False)
        labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            images=self.images[idx].copy(),
            labels=self.labels[idx].copy(),
            kind=self.kind,
            num_classes=self.num_classes,
            split=split or self.split,
            groups=None if self.groups is None else self.groups[idx],
        )

    def boxes(self) -> list[BoundingBox]:
        if self.kind != "localization":
            raise TypeError("dataset has class labels, not boxes")
        return [BoundingBox.from_array(b) for b in self.labels]


def train_test_split(ds: LabeledDataset, test_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded holdout split; examples sharing a group land on the same side."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    groups = ds.groups if ds.groups is not None else np.arange(len(ds))
    uniq = np.unique(groups)
    rng.shuffle(uniq)
    n_test = max(1, int(round(test_fraction * len(uniq))))
    test_groups = set(uniq[:n_test].tolist())
    is_test = np.array([g in test_groups for g in groups.tolist()])
    return (ds.subset(np.flatnonzero(~is_test), "train"),
            ds.subset(np.flatnonzero(is_test), "test"))


# --------------------------------------------------------------------------- GTSRB


def _resize(img: PILImage.Image, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    out = img.resize((w, h), PILImage.BILINEAR)
    return np.asarray(out, dtype=np.float32) / 255.0


def _class_dirs(root: Path) -> dict[int, Path]:
    # accept either the class directories themselves or the official
    # GTSRB/Final_Training/Images nesting
    for cand in (root, root / "Images", root / "Final_Training" / "Images",
                 root / "GTSRB" / "Final_Training" / "Images"):
        if cand.is_dir():
            dirs = {int(p.name): p for p in cand.iterdir() if p.is_dir() and p.name.isdigit()}
            if dirs:
                return dirs
    raise IngestionError(f"no GTSRB class directories found under {root}")


def load_gtsrb(root_path, class_subset: Sequence[int] | None = None,
               image_size: tuple[int, int] = (32, 32)) -> LabeledDataset:
    """Load a GTSRB training tree into a classification dataset.

    Each class directory holds PPM images and a ``GT-<class>.csv`` annotation
    file. Images are cropped to their ROI, resized to ``image_size`` and
    scaled to [0, 1]. With ``class_subset`` the selected class ids are
    remapped to ``0..len(class_subset)-1`` in the given order.
    Examples are grouped by track (the filename prefix before ``_``).
    """
    root = Path(root_path)
    if not root.is_dir():
        raise IngestionError(f"GTSRB root directory does not exist: {root}")
    dirs = _class_dirs(root)
    if class_subset is None:
        wanted = sorted(dirs)
        num_classes = max(GTSRB_NUM_CLASSES, max(wanted) + 1)
        remap = {c: c for c in wanted}
    else:
        wanted = [int(c) for c in class_subset]
        if len(set(wanted)) != len(wanted):
            raise ValueError("class_subset contains duplicates")
        num_classes = len(wanted)
        remap = {c: i for i, c in enumerate(wanted)}

    images, labels, groups = [], [], []
    for class_id in wanted:
        cdir = dirs.get(class_id)
        if cdir is None:
            raise IngestionError(f"missing class directory for class {class_id} under {root}")
        csv_path = cdir / f"GT-{cdir.name}.csv"
        if not csv_path.is_file():
            raise IngestionError(f"missing annotation file {csv_path}")
        with open(csv_path, newline="") as fh:
            reader = csv.reader(fh, delimiter=";")
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != GTSRB_COLUMNS:
                raise IngestionError(f"{csv_path}: unexpected header {header}")
            for row_no, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(GTSRB_COLUMNS):
                    raise IngestionError(f"{csv_path}: malformed row {row_no}: expected 8 fields, got {len(row)}")
                try:
                    fname = row[0].strip()
                    x1, y1, x2, y2, cid = (int(v) for v in row[3:8])
                except ValueError as exc:
                    raise IngestionError(f"{csv_path}: malformed row {row_no}: {exc}") from None
                if cid != class_id:
                    raise IngestionError(f"{csv_path}: row {row_no} has ClassId {cid}, expected {class_id}")
                img_path = cdir / fname
                try:
                    with PILImage.open(img_path) as im:
                        im = im.convert("RGB")
                        # ROI corners are inclusive pixel coordinates
                        x2, y2 = min(x2 + 1, im.width), min(y2 + 1, im.height)
                        if not (0 <= x1 < x2 and 0 <= y1 < y2):
                            raise IngestionError(f"{csv_path}: row {row_no} has an empty ROI")
                        arr = _resize(im.crop((x1, y1, x2, y2)), image_size)
                except OSError as exc:
                    raise IngestionError(f"cannot read image {img_path}: {exc}") from None
                images.append(arr)
                labels.append(remap[class_id])
                groups.append(f"{class_id}/{fname.split('_')[0]}")

    if not images:
        raise IngestionError(f"no images found under {root} for classes {wanted}")
    return LabeledDataset(
        images=np.stack(images),
        labels=np.asarray(labels),
        kind="classification",
        num_classes=num_classes,
        split="train",
        groups=np.asarray(groups),
    )


# ------------------------------------------------------------ synthetic scenarios


def make_synthetic_pd_dataset(n: int, image_size: tuple[int, int] = (64, 64), seed: int = 0,
                              area_range: tuple[float, float] = (0.02, 0.15),
                              aspect_range: tuple[float, float] = (1.5, 3.0)) -> LabeledDataset:
    """Single-pedestrian localization images.

    Each image is a smooth random texture with one tall, high-contrast
    rectangle; its normalized box is the label. ``area_range`` bounds the
    box area as a fraction of the image, ``aspect_range`` the height/width
    ratio.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    h, w = image_size
    rng = np.random.default_rng(seed)
    images = np.empty((n, h, w, 3), dtype=np.float32)
    boxes = np.empty((n, 4), dtype=np.float32)
    for i in range(n):
        images[i] = _texture(rng, h, w)
        while True:
            area = rng.uniform(*area_range) * h * w
            aspect = rng.uniform(*aspect_range)
            bw = int(round(math.sqrt(area / aspect)))
            bh = int(round(bw * aspect))
            if bw >= 2 and bh >= 2 and bw <= w and bh <= h:
                break
        x0 = int(rng.integers(0, w - bw + 1))
        y0 = int(rng.integers(0, h - bh + 1))
        if rng.random() < 0.5:
            color = rng.uniform(0.0, 0.15, size=3)
        else:
            color = rng.uniform(0.85, 1.0, size=3)
        images[i, y0:y0 + bh, x0:x0 + bw] = color
        boxes[i] = (x0 / w, y0 / h, (x0 + bw) / w, (y0 + bh) / h)
    return LabeledDataset(images=images, labels=boxes, kind="localization", split="train")


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Mid-range smooth noise background with a little fine grain."""
    coarse = rng.uniform(0.3, 0.7, size=(4, 4, 3)).astype(np.float32)
    img = PILImage.fromarray((coarse * 255).astype(np.uint8)).resize((w, h), PILImage.BICUBIC)
    base = np.asarray(img, dtype=np.float32) / 255.0
    base += rng.normal(0.0, 0.03, size=base.shape).astype(np.float32)
    return np.clip(base, 0.25, 0.75)


TOY2D_CENTERS = np.array([[0.25, 0.3], [0.75, 0.35], [0.5, 0.78]])


def make_toy2d_dataset(n: int, seed: int = 0, spread: float = 0.13) -> LabeledDataset:
    """Three Gaussian clusters in the unit square, rendered as 1x1x2 images."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=n)
    pts = TOY2D_CENTERS[labels] + rng.normal(0.0, spread, size=(n, 2))
    pts = np.clip(pts, 0.0, 1.0).astype(np.float32)
    return LabeledDataset(images=pts.reshape(n, 1, 1, 2), labels=labels,
                          kind="classification", num_classes=3)


def toy2d_grid(resolution: int = 200) -> np.ndarray:
    """Dense evaluation grid over the unit square as a (res*res, 1, 1, 2) batch."""
    ticks = (np.arange(resolution, dtype=np.float64) + 0.5) / resolution
    xx, yy = np.meshgrid(ticks, ticks)
    return np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float32).reshape(-1, 1, 1, 2)


# ------------------------------------------------------------------- persistence


def _to_png(arr: np.ndarray) -> PILImage.Image:
    u8 = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    if u8.shape[2] == 1:
        return PILImage.fromarray(u8[:, :, 0], mode="L")
    if u8.shape[2] == 2:
        # two-channel toy images are padded into RGB with a zero blue channel
        u8 = np.concatenate([u8, np.zeros_like(u8[:, :, :1])], axis=2)
    return PILImage.fromarray(u8, mode="RGB")


def save_images(images: np.ndarray, directory, labels: Iterable | None = None,
                extra: dict | None = None) -> Path:
    """Write a batch as PNG files plus an ``index.json``.

    PNG storage quantizes pixels to 8 bits.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.asarray(images)
    labels = list(labels) if labels is not None else [None] * len(images)
    entries = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        fname = f"{i:06d}.png"
        _to_png(img).save(directory / fname)
        if isinstance(lab, np.ndarray):
            lab = lab.tolist()
        elif isinstance(lab, np.generic):
            lab = lab.item()
        entries.append({"file": fname, "label": lab})
    index = {"examples": entries, "shape": list(images.shape[1:])}
    index.update(extra or {})
    with open(directory / "index.json", "w") as fh:
        json.dump(index, fh)
    return directory


def load_images(directory) -> tuple[np.ndarray, list, dict]:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.is_file():
        raise IngestionError(f"missing image index {index_path}")
    with open(index_path) as fh:
        index = json.load(fh)
    shape = tuple(index["shape"])
    imgs, labels = [], []
    for entry in index["examples"]:
        with PILImage.open(directory / entry["file"]) as im:
            arr = np.asarray(im, dtype=np.float32) / 255.0
        if arr.ndim == 2:
            arr = arr[:, :, None]
        imgs.append(arr[:, :, :shape[2]])
        labels.append(entry["label"])
    images = np.stack(imgs) if imgs else np.zeros((0, *shape), np.float32)
    return images, labels, index


def save_dataset(ds: LabeledDataset, directory) -> Path:
    return save_images(ds.images, directory, labels=ds.labels,
                       extra={"num_classes": ds.num_classes, "kind": ds.kind, "split": ds.split})


def load_dataset(directory) -> LabeledDataset:
    images, labels, index = load_images(directory)
    return LabeledDataset(images=images, labels=np.asarray(labels), kind=index.get("kind", "classification"),
                          num_classes=index.get("num_classes"), split=index.get("split", "train"))


def default_cache_dir() -> Path:
    return Path(os.environ.get("KILLCHAIN_CACHE", Path.home() / ".cache" / "killchain"))
