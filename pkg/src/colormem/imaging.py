"""Image samples, dataset directories and the synthetic corpus generator."""

from __future__ import annotations

import colorsys
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .color_features import in_gamut, lab_to_rgb

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
LABELS_FILE = "labels.tsv"


def grayscale(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma, rounded half up to uint8."""
    rgb = np.asarray(rgb, dtype=np.int64)
    # integer weights keep the rounding exact
    luma = 299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2]
    return ((luma + 500) // 1000).astype(np.uint8)


@dataclass
class ImageSample:
    rgb: np.ndarray  # (H, W, 3) uint8
    name: str = ""
    label: str | None = None

    def __post_init__(self):
        self.rgb = np.ascontiguousarray(self.rgb, dtype=np.uint8)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) image, got shape {self.rgb.shape}")
        self._gray = None

    @property
    def gray(self) -> np.ndarray:
        if self._gray is None:
            self._gray = grayscale(self.rgb)
        return self._gray

    @property
    def size(self) -> int:
        return self.rgb.shape[0] * self.rgb.shape[1]


def load_image(path, label: str | None = None) -> ImageSample:
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"))
    return ImageSample(rgb, name=os.path.basename(path), label=label)


def read_labels(directory) -> dict[str, str]:
    path = Path(directory) / LABELS_FILE
    if not path.exists():
        return {}
    labels = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'filename<TAB>class'")
        labels[parts[0]] = parts[1]
    return labels


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(directory) -> tuple[list[ImageSample], list[str]]:
    """Decode every image in ``directory``; returns (samples, undecodable names)."""
    labels = read_labels(directory)
    samples, failed = [], []
    for path in list_images(directory):
        try:
            samples.append(load_image(path, labels.get(path.name)))
        except Exception as exc:  # PIL raises a zoo of types on bad files
            log.warning("skipping %s: %s", path.name, exc)
            failed.append(path.name)
    return samples, failed


def save_png(rgb: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

BACKGROUND = (236, 236, 236)

_SHAPES = (
    "disk", "hstripes", "square", "vstripes", "ring", "diag", "cross",
    "antidiag", "triangle", "checker", "xcross", "frame", "dots", "diamond",
    "hbar", "vbar", "halfplane", "corners",
)


def class_color(c: int, n_classes: int) -> tuple[int, int, int]:
    """A moderate-chroma color for class ``c``; hues evenly spaced.

    Chroma is kept moderate so that the colors survive luminance-preserving
    recoloring from their own luma.
    """
    hue = 2.0 * math.pi * (c + 0.5) / max(n_classes, 1)
    L, chroma = 58.0, 42.0
    lab = np.array([L, chroma * math.cos(hue), chroma * math.sin(hue)])
    while not in_gamut(lab):
        lab[1:] *= 0.95
    return tuple(int(v) for v in np.floor(lab_to_rgb(lab) + 0.5))


def _shape_mask(shape: str, size: int, scale: float, dx: float, dy: float, phase: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = size / 2 + dx, size / 2 + dy
    u, v = (x - cx) / scale, (y - cy) / scale
    r = np.hypot(u, v)
    period = size / 5.0
    if shape == "disk":
        return r < size * 0.3
    if shape == "ring":
        return (r < size * 0.36) & (r > size * 0.22)
    if shape == "square":
        return (np.abs(u) < size * 0.28) & (np.abs(v) < size * 0.28)
    if shape == "frame":
        m = np.maximum(np.abs(u), np.abs(v))
        return (m < size * 0.4) & (m > size * 0.26)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) < size * 0.36
    if shape == "triangle":
        return (v < size * 0.3) & (v > -size * 0.3) & (np.abs(u) < (v + size * 0.3) * 0.6)
    if shape == "cross":
        return ((np.abs(u) < size * 0.09) | (np.abs(v) < size * 0.09)) & (r < size * 0.45)
    if shape == "xcross":
        return ((np.abs(u - v) < size * 0.12) | (np.abs(u + v) < size * 0.12)) & (r < size * 0.45)
    if shape == "hbar":
        return np.abs(v) < size * 0.14
    if shape == "vbar":
        return np.abs(u) < size * 0.14
    if shape == "hstripes":
        return ((y + phase * period) % period) < period / 2
    if shape == "vstripes":
        return ((x + phase * period) % period) < period / 2
    if shape == "diag":
        return ((x + y + phase * period) % period) < period / 2
    if shape == "antidiag":
        return ((x - y + phase * period) % period) < period / 2
    if shape == "checker":
        q = size / 4.0
        return ((np.floor((x + phase * q) / q) + np.floor((y + phase * q) / q)) % 2) == 0
    if shape == "dots":
        q = size / 4.0
        return np.hypot((x + phase * q) % q - q / 2, (y + phase * q) % q - q / 2) < q * 0.3
    if shape == "halfplane":
        return u < -size * 0.05
    if shape == "corners":
        return (np.abs(u) > size * 0.22) & (np.abs(v) > size * 0.22)
    raise ValueError(shape)


def synthetic_image(c: int, n_classes: int, rng: np.random.Generator, size: int = 64,
                    color=None, jitter: float = 1.0) -> np.ndarray:
    shape = _SHAPES[c % len(_SHAPES)]
    # classes beyond the shape list reuse shapes at a different base scale
    base = 1.0 - 0.25 * (c // len(_SHAPES) % 3)
    scale = base * (1.0 + jitter * rng.uniform(-0.08, 0.08))
    dx, dy = jitter * rng.uniform(-3.0, 3.0, size=2)
    phase = jitter * rng.uniform(0.0, 0.3)
    mask = _shape_mask(shape, size, scale, dx, dy, phase)
    color = class_color(c, n_classes) if color is None else color
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    img[mask] = color
    return img


def synthetic_corpus(n_classes: int, per_class: int, seed: int = 0, size: int = 64,
                     consistent_color: bool = True) -> list[ImageSample]:
    """Images of ``n_classes`` shape classes, ``per_class`` each, class-major order.

    With ``consistent_color`` every class has one fixed color; otherwise each
    image gets an arbitrary color (the case threshold triplet training is not
    meant to handle).
    """
    rng = np.random.default_rng(seed)
    out = []
    for c in range(n_classes):
        for i in range(per_class):
            color = None
            if not consistent_color:
                h = rng.uniform()
                color = tuple(int(round(255 * v)) for v in colorsys.hsv_to_rgb(h, 0.55, 0.8))
            img = synthetic_image(c, n_classes, rng, size=size, color=color)
            out.append(ImageSample(img, name=f"c{c:02d}_{i:03d}.png", label=f"class{c:02d}"))
    return out


def write_corpus(samples: list[ImageSample], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        save_png(s.rgb, directory / s.name)
        if s.label is not None:
            lines.append(f"{s.name}\t{s.label}")
    if lines:
        (directory / LABELS_FILE).write_text("\n".join(lines) + "\n")
