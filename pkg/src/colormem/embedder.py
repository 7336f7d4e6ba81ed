"""Spatial descriptors and the trainable normalized projection that forms queries."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

DIM = 512
GRID = 8
CELL = 8
SIDE = GRID * CELL
N_ORIENT = 7


class DegenerateProjection(ValueError):
    pass


def _resize(gray: np.ndarray) -> np.ndarray:
    gray = np.asarray(gray, dtype=np.float32)
    if gray.shape == (SIDE, SIDE):
        return gray.astype(np.float64)
    # box filter is an exact block mean for integer downscale factors
    im = Image.fromarray(gray, mode="F").resize((SIDE, SIDE), Image.BOX)
    return np.asarray(im, dtype=np.float64)


def _gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(img, 1, mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return gx, gy


def orientation_bins(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Unsigned gradient orientation in [0, pi) split into 7 bins; bin 0 is horizontal."""
    theta = np.arctan2(gy, gx)
    theta = np.where(theta < 0, theta + np.pi, theta)
    theta = np.where(theta >= np.pi, theta - np.pi, theta)
    return np.minimum((theta / (np.pi / N_ORIENT)).astype(np.intp), N_ORIENT - 1)


def describe(gray: np.ndarray) -> np.ndarray:
    """512-dim grid descriptor of a grayscale plane.

    The plane is resized to 64x64 and split into 8x8 cells of 8x8 pixels.
    Each cell contributes its mean intensity (scaled to [0, 1]) followed by a
    magnitude-weighted 7-bin orientation histogram, L2-normalized per cell.
    """
    gray = np.asarray(gray)
    if gray.size == 0:
        raise ValueError("empty image")
    img = _resize(gray) / 255.0
    gx, gy = _gradients(img)
    mag = np.hypot(gx, gy)
    bins = orientation_bins(gx, gy)

    cell_of = lambda a: a.reshape(GRID, CELL, GRID, CELL).transpose(0, 2, 1, 3).reshape(GRID * GRID, -1)
    means = cell_of(img).mean(axis=1)
    mag_c, bins_c = cell_of(mag), cell_of(bins)
    hist = np.zeros((GRID * GRID, N_ORIENT))
    rows = np.repeat(np.arange(GRID * GRID), CELL * CELL)
    np.add.at(hist, (rows, bins_c.ravel()), mag_c.ravel())
    norms = np.linalg.norm(hist, axis=1, keepdims=True)
    hist = np.divide(hist, norms, out=np.zeros_like(hist), where=norms > 0)
    return np.concatenate([means[:, None], hist], axis=1).ravel()


class GridDescriptor:
    """Default embedder: describes the grayscale plane of a sample."""

    def __call__(self, sample) -> np.ndarray:
        return describe(sample.gray)


class ExternalDescriptors:
    """Embedder reading precomputed ``<image name>.desc`` files from a directory."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def __call__(self, sample) -> np.ndarray:
        return read_descriptor(self.directory / (sample.name + ".desc"))


def read_descriptor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) != DIM * 4:
        raise ValueError(f"{path}: expected {DIM * 4} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def write_descriptor(desc: np.ndarray, path) -> None:
    desc = np.asarray(desc, dtype="<f4")
    if desc.shape != (DIM,):
        raise ValueError(f"descriptor must have {DIM} values")
    Path(path).write_bytes(desc.tobytes())


@dataclass
class Projection:
    W: np.ndarray  # (512, 512)
    b: np.ndarray  # (512,)

    @classmethod
    def init(cls, seed: int = 0, dim: int = DIM, noise: float = 0.01) -> Projection:
        rng = np.random.default_rng(seed)
        W = np.eye(dim) + rng.normal(0.0, noise, size=(dim, dim))
        return cls(W, np.zeros(dim))

    def copy(self) -> Projection:
        return Projection(self.W.copy(), self.b.copy())


def _forward(desc, proj: Projection) -> tuple[np.ndarray, float]:
    u = proj.W @ np.asarray(desc, dtype=np.float64) + proj.b
    norm = float(np.linalg.norm(u))
    if not norm > 1e-12:
        raise DegenerateProjection("degenerate projection")
    return u, norm


def project(desc, proj: Projection) -> np.ndarray:
    """Unit-norm query ``(W desc + b) / ||W desc + b||``."""
    u, norm = _forward(desc, proj)
    return u / norm


def project_backward(desc, proj: Projection, grad_q) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a scalar loss w.r.t. (W, b) given its gradient w.r.t. the query."""
    desc = np.asarray(desc, dtype=np.float64)
    u, norm = _forward(desc, proj)
    q = u / norm
    grad_q = np.asarray(grad_q, dtype=np.float64)
    # the normalization Jacobian drops the radial component
    grad_u = (grad_q - q * (q @ grad_q)) / norm
    return np.outer(grad_u, desc), grad_u
