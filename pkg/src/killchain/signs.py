"""Procedural traffic-sign images written in the GTSRB training layout.

Used when no GTSRB copy is available. Every class id of the 43-class
GTSRB taxonomy gets a sign family (shape and colors) resembling the real
sign plus a class-specific pictogram. Images come in tracks, like GTSRB:
one physical sign seen at growing size under fixed lighting.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageFilter

from .data import GTSRB_COLUMNS

RED = (0.80, 0.08, 0.10)
WHITE = (0.95, 0.95, 0.95)
BLACK = (0.05, 0.05, 0.05)
BLUE = (0.08, 0.25, 0.70)
YELLOW = (0.97, 0.78, 0.10)
GREY = (0.45, 0.45, 0.45)

# 3x5 digit font, rows top to bottom
DIGITS = {
    "0": ["111", "101", "101", "101", "111"],
    "1": ["010", "110", "010", "010", "111"],
    "2": ["111", "001", "111", "100", "111"],
    "3": ["111", "001", "111", "001", "111"],
    "5": ["111", "100", "111", "001", "111"],
    "6": ["111", "100", "111", "101", "111"],
    "7": ["111", "001", "010", "010", "010"],
    "8": ["111", "101", "111", "101", "111"],
}
SPEED_LIMITS = {0: "20", 1: "30", 2: "50", 3: "60", 4: "70", 5: "80", 7: "100", 8: "120"}


def sign_family(class_id: int) -> str:
    if class_id in SPEED_LIMITS:
        return "speed"
    if class_id in (9, 10, 15, 16):
        return "prohibitory"
    if class_id == 11 or 18 <= class_id <= 31:
        return "warning"
    if class_id == 12:
        return "priority"
    if class_id == 13:
        return "yield"
    if class_id == 14:
        return "stop"
    if class_id == 17:
        return "no_entry"
    if class_id in (6, 32, 41, 42):
        return "end"
    if 33 <= class_id <= 40:
        return "mandatory"
    raise ValueError(f"unknown GTSRB class id {class_id}")


def glyph(class_id: int) -> np.ndarray:
    """Binary pictogram for a class (rows x cols)."""
    if class_id in SPEED_LIMITS:
        text = SPEED_LIMITS[class_id]
        cols = []
        for i, ch in enumerate(text):
            if i:
                cols.append(np.zeros((5, 1), dtype=bool))
            cols.append(np.array([[c == "1" for c in row] for row in DIGITS[ch]]))
        return np.concatenate(cols, axis=1)
    rng = np.random.default_rng(1000 + class_id)
    fam = sign_family(class_id)
    if fam in ("priority", "no_entry", "yield"):
        return np.zeros((5, 5), dtype=bool)
    if fam == "stop":
        return np.array([[c == "1" for c in row] for row in
                         ["1110111011101110", "1000010010101010", "1110010010101110",
                          "0010010010101000", "1110010011101000"]])
    if fam == "end":
        return np.zeros((5, 5), dtype=bool)
    bits = rng.random((5, 5)) < 0.45
    if fam == "mandatory":
        bits = bits | bits[:, ::-1]  # arrows are roughly mirror-symmetric
    if not bits.any():
        bits[2, 2] = True
    return bits


def _shape_mask(fam: str, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Outer sign mask and inner (fill) mask on sign coordinates in [-1, 1]."""
    r = np.hypot(u, v)
    if fam in ("speed", "prohibitory", "no_entry", "end", "mandatory"):
        outer = r <= 1.0
        inner = r <= (0.92 if fam == "end" else 0.76)
        if fam in ("no_entry", "mandatory"):
            inner = outer
    elif fam == "warning":
        outer = _triangle(u, v, up=True, scale=1.0)
        inner = _triangle(u, v, up=True, scale=0.68)
    elif fam == "yield":
        outer = _triangle(u, v, up=False, scale=1.0)
        inner = _triangle(u, v, up=False, scale=0.6)
    elif fam == "priority":
        d = np.abs(u) + np.abs(v)
        outer = d <= 1.0
        inner = d <= 0.72
    elif fam == "stop":
        oct_ = np.maximum(np.maximum(np.abs(u), np.abs(v)), (np.abs(u) + np.abs(v)) / math.sqrt(2) * 1.08)
        outer = oct_ <= 1.0
        inner = oct_ <= 0.9
    else:
        raise ValueError(fam)
    return outer, inner


def _triangle(u, v, up: bool, scale: float) -> np.ndarray:
    # apex at v=-1, base at v=0.8; shrunk about the centroid for inner masks
    if not up:
        v = -v
    cy = 0.2
    u2 = u / scale
    v2 = (v - cy) / scale + cy
    return (v2 <= 0.8) & (v2 >= -1.0 + 1.8 * np.abs(u2))


def _colors(fam: str):
    """(border, fill, glyph) colors per family."""
    return {
        "speed": (RED, WHITE, BLACK),
        "prohibitory": (RED, WHITE, BLACK),
        "warning": (RED, WHITE, BLACK),
        "yield": (RED, WHITE, BLACK),
        "priority": (WHITE, YELLOW, BLACK),
        "stop": (WHITE, RED, WHITE),
        "no_entry": (RED, RED, WHITE),
        "end": (GREY, WHITE, BLACK),
        "mandatory": (BLUE, BLUE, WHITE),
    }[fam]


def render_sign(class_id: int, size: int, rotation: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Render a sign on a transparent square; returns (rgb, alpha) at ``size`` pixels."""
    ss = 3
    n = size * ss
    t = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    uu, vv = np.meshgrid(t, t)
    c, s = math.cos(rotation), math.sin(rotation)
    u = c * uu + s * vv
    v = -s * uu + c * vv
    fam = sign_family(class_id)
    outer, inner = _shape_mask(fam, u, v)
    border, fill, ink = _colors(fam)
    rgb = np.zeros((n, n, 3), dtype=np.float32)
    rgb[outer] = border
    rgb[inner] = fill

    g = glyph(class_id)
    gh, gw = g.shape
    half_w = 0.45 if gw <= 7 else 0.7
    half_h = half_w * gh / gw * (1.6 if gw > 7 else 1.0)
    half_h = min(half_h, 0.42)
    gy = ((v + half_h) / (2 * half_h) * gh).astype(int)
    gx = ((u + half_w) / (2 * half_w) * gw).astype(int)
    inside = (gy >= 0) & (gy < gh) & (gx >= 0) & (gx < gw) & inner
    if fam == "warning":
        inside &= v > -0.25
    hit = np.zeros_like(inside)
    hit[inside] = g[gy[inside], gx[inside]]
    rgb[hit] = ink
    if fam == "no_entry":
        rgb[(np.abs(v) < 0.17) & (np.abs(u) < 0.65)] = WHITE
    if fam == "end":
        stripe = (np.abs(u + v) < 0.18) & inner
        rgb[stripe] = GREY
    alpha = outer.astype(np.float32)
    # box-filter downsample of the supersampled render
    rgb = rgb.reshape(size, ss, size, ss, 3).mean(axis=(1, 3))
    alpha = alpha.reshape(size, ss, size, ss).mean(axis=(1, 3))
    return rgb, alpha


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    palette = rng.uniform(0.1, 0.8, size=(3, 3, 3))
    img = Image.fromarray((palette * 255).astype(np.uint8)).resize((w, h), Image.BICUBIC)
    return np.asarray(img, dtype=np.float32) / 255.0


def render_frame(class_id: int, canvas: int, rng: np.random.Generator, *, light: float,
                 cast: np.ndarray, rotation: float, blur: float, noise: float,
                 bg_seed: int) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """One GTSRB-like frame: sign with ~10% margin on a textured background.

    Returns (uint8 image, inclusive ROI x1, y1, x2, y2).
    """
    margin = max(2, int(round(canvas * rng.uniform(0.08, 0.14))))
    sign = canvas - 2 * margin
    bg = _background(np.random.default_rng(bg_seed), canvas, canvas)
    rgb, alpha = render_sign(class_id, sign, rotation)
    ox = margin + int(rng.integers(-1, 2))
    oy = margin + int(rng.integers(-1, 2))
    ox = min(max(ox, 0), canvas - sign)
    oy = min(max(oy, 0), canvas - sign)
    region = bg[oy:oy + sign, ox:ox + sign]
    bg[oy:oy + sign, ox:ox + sign] = alpha[..., None] * rgb + (1 - alpha[..., None]) * region
    img = np.clip(bg * light * cast, 0.0, 1.0)
    pil = Image.fromarray((img * 255).astype(np.uint8))
    if blur > 0:
        pil = pil.filter(ImageFilter.GaussianBlur(blur))
    arr = np.asarray(pil, dtype=np.float32) / 255.0
    arr = np.clip(arr + rng.normal(0.0, noise, size=arr.shape), 0.0, 1.0)
    roi = (ox, oy, ox + sign - 1, oy + sign - 1)
    return (arr * 255).round().astype(np.uint8), roi


def write_synthetic_gtsrb(root, class_ids: Sequence[int], tracks_per_class: int = 20,
                          frames_per_track: int = 15, seed: int = 0) -> Path:
    """Write a GTSRB-format training tree (``<root>/<class:05d>/GT-<class:05d>.csv`` + PPMs)."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for class_id in class_ids:
        cdir = root / f"{class_id:05d}"
        cdir.mkdir(parents=True, exist_ok=True)
        rows = []
        for track in range(tracks_per_class):
            light = rng.uniform(0.35, 1.15)
            cast = rng.uniform(0.85, 1.15, size=3)
            rotation = rng.uniform(-0.15, 0.15)
            bg_seed = int(rng.integers(0, 2**31))
            start = int(rng.integers(28, 40))
            stop = int(rng.integers(44, 72))
            sizes = np.linspace(start, stop, frames_per_track).round().astype(int)
            for frame, canvas in enumerate(sizes):
                img, (x1, y1, x2, y2) = render_frame(
                    class_id, int(canvas), rng, light=light, cast=cast, rotation=rotation,
                    blur=rng.uniform(0.0, 1.0), noise=rng.uniform(0.0, 0.04), bg_seed=bg_seed)
                fname = f"{track:05d}_{frame:05d}.ppm"
                Image.fromarray(img).save(cdir / fname, format="PPM")
                rows.append([fname, canvas, canvas, x1, y1, x2, y2, class_id])
        with open(cdir / f"GT-{class_id:05d}.csv", "w", newline="") as fh:
            writer = csv.writer(fh, delimiter=";")
            writer.writerow(GTSRB_COLUMNS)
            writer.writerows(rows)
    return root
