"""AdaIN, smooth L1, and a deterministic palette-transfer colorizer.

The colorizer is a stand-in for a learned generator: it keeps the input's
lightness and paints each luminance band with the chromaticity of one
palette color.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .color_features import (
    PALETTE_SIZE,
    Palette,
    build_quantizer,
    lab_to_linear_rgb,
    lab_to_rgb,
    rgb_to_lab,
)


@dataclass(frozen=True)
class AffineParams:
    gamma: np.ndarray  # (C,)
    beta: np.ndarray  # (C,)


def adain(z: np.ndarray, params: AffineParams) -> np.ndarray:
    """Per-channel standardization of a (C, H, W) map, then scale and shift."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3 or min(z.shape) < 1:
        raise ValueError("feature map must have shape (C, H, W) with C, H, W >= 1")
    mu = z.mean(axis=(1, 2), keepdims=True)
    sigma = z.std(axis=(1, 2), keepdims=True)
    if np.any(sigma <= 1e-12):
        raise ValueError("degenerate channel")
    gamma = np.asarray(params.gamma, dtype=np.float64).reshape(-1, 1, 1)
    beta = np.asarray(params.beta, dtype=np.float64).reshape(-1, 1, 1)
    return gamma * (z - mu) / sigma + beta


def smooth_l1(y, y_hat, delta_h: float = 1.0) -> float:
    """Mean Huber loss with threshold ``delta_h``."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    if not delta_h > 0:
        raise ValueError("delta_h must be positive")
    d = np.abs(y - y_hat)
    per = np.where(d <= delta_h, 0.5 * d * d, delta_h * d - 0.5 * delta_h * delta_h)
    return float(per.mean())


# ---------------------------------------------------------------------------
# Palette transfer
# ---------------------------------------------------------------------------

_SCALE_STEPS = 30


def max_chroma_scale(L, a, b) -> np.ndarray:
    """Largest s in [0, 1] with (L, s*a, s*b) inside the sRGB gamut (bisection)."""
    L, a, b = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (L, a, b)))

    def ok(s):
        lin = lab_to_linear_rgb(np.stack([L, s * a, s * b], axis=-1))
        return np.all((lin >= -1e-9) & (lin <= 1 + 1e-9), axis=-1)

    lo = np.zeros(L.shape)
    hi = np.ones(L.shape)
    full = ok(hi)
    for _ in range(_SCALE_STEPS):
        mid = (lo + hi) / 2
        good = ok(mid)
        lo = np.where(good, mid, lo)
        hi = np.where(good, hi, mid)
    return np.where(full, 1.0, lo)


def _band_of_pixels(gray: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Band index per pixel: luminance rank quantiles with band widths given by ``weights``."""
    flat = gray.ravel()
    order = np.argsort(flat, kind="stable")
    n = flat.size
    edges = np.cumsum(weights) / weights.sum() * n
    rank_band = np.searchsorted(edges, np.arange(n) + 0.5, side="right")
    band = np.empty(n, dtype=np.intp)
    band[order] = np.minimum(rank_band, len(weights) - 1)
    return band.reshape(gray.shape)


def _gray_lightness(gray: np.ndarray) -> np.ndarray:
    levels = rgb_to_lab(np.repeat(np.arange(256, dtype=np.float64)[:, None], 3, axis=1))[:, 0]
    return levels[gray]


def _order_by_feasibility(ab: np.ndarray, weights: np.ndarray, gray: np.ndarray) -> np.ndarray:
    """Order chromaticities without lightness so each lands on a band it fits.

    Starts from the midpoint of each color's in-gamut lightness range and
    greedily applies single moves that lower the summed chroma loss.
    """
    levels = np.arange(256)
    L_lv = _gray_lightness(levels)
    # (colors, 256) chroma loss at each gray level
    loss_lv = 1.0 - max_chroma_scale(L_lv[None, :], ab[:, :1], ab[:, 1:2])
    counts = np.bincount(gray.ravel(), minlength=256).astype(np.float64)
    cum = np.concatenate([[0.0], np.cumsum(counts)])
    n = cum[-1]

    def cost(order):
        w = weights[order]
        edges = np.concatenate([[0.0], np.cumsum(w) / w.sum() * n])
        total = 0.0
        for j, c in enumerate(order):
            lo, hi = edges[j], edges[j + 1]
            # pixels of each gray level falling inside this rank band
            overlap = np.clip(np.minimum(cum[1:], hi) - np.maximum(cum[:-1], lo), 0.0, None)
            total += float(overlap @ loss_lv[c])
        return total

    L_grid = np.linspace(0.0, 100.0, 101)
    fits = max_chroma_scale(L_grid[None, :], ab[:, :1], ab[:, 1:2]) >= 1.0
    mid = np.array([L_grid[f].mean() if f.any() else 50.0 for f in fits])
    order = list(np.argsort(mid, kind="stable"))
    best = cost(order)
    improved = True
    while improved:
        improved = False
        for i in range(len(order)):
            for j in range(len(order)):
                if i == j:
                    continue
                cand = order.copy()
                cand.insert(j, cand.pop(i))
                c = cost(cand)
                if c < best - 1e-9:
                    order, best, improved = cand, c, True
    return np.array(order, dtype=np.intp)


def working_palette(feature, gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(ab, weights) of up to 10 colors ordered dark to light for banding."""
    if isinstance(feature, Palette):
        keep = feature.weights > 0
        colors = feature.colors[keep]
        weights = feature.weights[keep].astype(np.float64)
        lab = rgb_to_lab(colors)
        order = np.argsort(lab[:, 0], kind="stable")
        return lab[order, 1:], weights[order]
    p = np.asarray(feature, dtype=np.float64)
    top = np.argsort(-p, kind="stable")[:PALETTE_SIZE]
    top = top[p[top] > 0]
    ab = build_quantizer().bin_centers[top]
    weights = p[top]
    order = _order_by_feasibility(ab, weights, gray)
    return ab[order], weights[order]


def palette_colorize(gray: np.ndarray, feature) -> np.ndarray:
    """Colorize a grayscale plane with a color feature; returns (H, W, 3) uint8.

    Lightness comes from the input; chroma is scaled down only as far as
    needed to stay inside the sRGB gamut, so hue and lightness survive.
    """
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.size == 0:
        raise ValueError("empty image")
    ab, weights = working_palette(feature, gray)
    band = _band_of_pixels(gray, weights)
    L = _gray_lightness(gray)
    a, b = ab[band, 0], ab[band, 1]
    s = max_chroma_scale(L, a, b)
    lab = np.stack([L, s * a, s * b], axis=-1)
    return np.floor(lab_to_rgb(lab) + 0.5).astype(np.uint8)
