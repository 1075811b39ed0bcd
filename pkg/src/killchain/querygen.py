"""Attack-query synthesis for black-box and gray-box extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset

NOISE_KINDS = ("gaussian", "salt_pepper", "uniform")
DEFAULT_NOISE_PARAMS = {"gaussian": 0.05, "salt_pepper": 0.05, "uniform": 0.1}
BACKGROUND = 0.5


def _check_n(n: int) -> None:
    if n <= 0:
        raise ValueError("n must be positive")


def _check_blob_ranges(blob_count_range, blob_size_range) -> None:
    lo, hi = blob_count_range
    if not 0 <= lo <= hi:
        raise ValueError(f"invalid blob_count_range {blob_count_range}")
    slo, shi = blob_size_range
    if not 0.0 < slo <= shi:
        raise ValueError(f"invalid blob_size_range {blob_size_range}")
    if shi > 1.0:
        raise ValueError(f"blob side fraction {shi} exceeds the image")


def gen_random_blobs(n: int, shape, blob_count_range=(1, 5), blob_size_range=(0.1, 0.5),
                     seed: int = 0) -> np.ndarray:
    """Mid-gray images carrying random axis-aligned squares of random color."""
    _check_n(n)
    _check_blob_ranges(blob_count_range, blob_size_range)
    h, w, c = shape
    side_base = min(h, w)
    rng = np.random.default_rng(seed)
    out = np.full((n, h, w, c), BACKGROUND, dtype=np.float32)
    lo, hi = blob_count_range
    slo, shi = blob_size_range
    for i in range(n):
        for _ in range(int(rng.integers(lo, hi + 1))):
            side = max(1, int(round(rng.uniform(slo, shi) * side_base)))
            y = int(rng.integers(0, h - side + 1))
            x = int(rng.integers(0, w - side + 1))
            out[i, y:y + side, x:x + side] = rng.random(c)
    return out


def gen_uniform_noise(n: int, shape, seed: int = 0) -> np.ndarray:
    _check_n(n)
    rng = np.random.default_rng(seed)
    return rng.random((n, *shape), dtype=np.float32)


def apply_noise(images: np.ndarray, kind: str, param: float, rng: np.random.Generator) -> np.ndarray:
    """One noise kind applied to a batch, clipped to [0, 1]."""
    images = np.asarray(images, dtype=np.float32)
    if kind == "gaussian":
        noisy = images + rng.normal(0.0, param, size=images.shape).astype(np.float32)
    elif kind == "uniform":
        noisy = images + rng.uniform(-param, param, size=images.shape).astype(np.float32)
    elif kind == "salt_pepper":
        noisy = images.copy()
        hit = rng.random(images.shape) < param
        noisy[hit] = (rng.random(int(hit.sum())) < 0.5).astype(np.float32)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return np.clip(noisy, 0.0, 1.0)


def graybox_sample_count(n_data: int, fraction: float) -> int:
    # guard against float round-up, e.g. 0.03 * 1000 == 30.000000000000004
    return min(n_data, max(1, math.ceil(fraction * n_data - 1e-9)))


def gen_graybox_perturbed(data: LabeledDataset, fraction: float = 0.03, noise_kinds=NOISE_KINDS,
                          noise_params: dict | None = None, seed: int = 0,
                          include_originals: bool = False) -> np.ndarray:
    """Noisy copies of a sample of dataset images (labels dropped).

    Samples ``ceil(fraction * len(data))`` images without replacement and
    emits one copy per noise kind, grouped per sampled image.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    if len(data) == 0:
        raise ValueError("dataset is empty")
    kinds = list(noise_kinds)
    if not kinds:
        raise ValueError("noise_kinds must not be empty")
    params = dict(DEFAULT_NOISE_PARAMS)
    params.update(noise_params or {})
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(data), size=graybox_sample_count(len(data), fraction), replace=False)
    picked = data.images[np.sort(idx)]
    per_kind = [apply_noise(picked, k, params[k], rng) for k in kinds]
    if include_originals:
        per_kind.insert(0, picked.copy())
    # interleave so each sampled image's variants sit together
    return np.stack(per_kind, axis=1).reshape(-1, *picked.shape[1:])


def build_attack_dataset(parts, seed: int = 0) -> np.ndarray:
    """Concatenate query parts in order, then apply a seeded shuffle."""
    images, _ = build_attack_dataset_with_provenance(parts, None, seed)
    return images


def build_attack_dataset_with_provenance(parts, names, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    parts = [np.asarray(p, dtype=np.float32) for p in parts]
    if not parts:
        raise ValueError("no query parts given")
    shapes = {p.shape[1:] for p in parts}
    if len(shapes) != 1:
        raise ValueError(f"query parts disagree in image shape: {sorted(shapes)}")
    names = names or [f"part{i}" for i in range(len(parts))]
    images = np.concatenate(parts)
    prov = np.concatenate([np.full(len(p), name) for p, name in zip(parts, names)])
    order = np.random.default_rng(seed).permutation(len(images))
    return images[order], prov[order]


@dataclass(frozen=True)
class QueryStrategy:
    """A named query recipe.

    ``blob`` and ``uniform_noise`` are black-box. ``graybox_perturbed``
    yields only noisy dataset samples; ``mixed`` is the full gray-box attack
    set: noisy samples combined with blob queries filling the remaining
    budget.
    """

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    KINDS = ("blob", "uniform_noise", "graybox_perturbed", "mixed")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        p = self.params
        if self.kind in ("blob", "mixed"):
            _check_blob_ranges(tuple(p.get("blob_count_range", (1, 5))),
                               tuple(p.get("blob_size_range", (0.1, 0.5))))
        if self.kind in ("graybox_perturbed", "mixed"):
            if not 0.0 < p.get("fraction", 0.03) <= 1.0:
                raise ValueError("fraction must be in (0, 1]")
            if not list(p.get("noise_kinds", NOISE_KINDS)):
                raise ValueError("noise_kinds must not be empty")

    @property
    def needs_public_data(self) -> bool:
        return self.kind in ("graybox_perturbed", "mixed")

    def generate(self, n: int, shape, public_data: LabeledDataset | None = None) -> tuple[np.ndarray, np.ndarray]:
        """``n`` query images and their per-image provenance tags."""
        _check_n(n)
        p = self.params
        shape = tuple(shape)
        if self.needs_public_data and public_data is None:
            raise ValueError(f"{self.kind} queries need public_data")

        def blobs(k, seed):
            return gen_random_blobs(k, shape, tuple(p.get("blob_count_range", (1, 5))),
                                    tuple(p.get("blob_size_range", (0.1, 0.5))), seed)

        def perturbed():
            return gen_graybox_perturbed(public_data, p.get("fraction", 0.03),
                                         p.get("noise_kinds", NOISE_KINDS), p.get("noise_params"),
                                         self.seed, p.get("include_originals", False))

        if self.kind == "blob":
            return blobs(n, self.seed), np.full(n, "blob")
        if self.kind == "uniform_noise":
            return gen_uniform_noise(n, shape, self.seed), np.full(n, "uniform_noise")
        if self.kind == "graybox_perturbed":
            imgs = perturbed()
            if len(imgs) < n:
                raise ValueError(f"gray-box sampling yields {len(imgs)} queries, {n} requested")
            return imgs[:n], np.full(n, "graybox_perturbed")
        noisy = perturbed()[:n]
        parts, names = [noisy], ["graybox_perturbed"]
        if n > len(noisy):
            parts.append(blobs(n - len(noisy), self.seed + 1))
            names.append("blob")
        return build_attack_dataset_with_provenance(parts, names, self.seed)
