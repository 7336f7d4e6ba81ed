"""Lab conversion, ab quantization, palettes and the two color distances.

Two color features are supported as memory values:

* a 313-bin distribution over quantized ab chromaticities, compared with a
  smoothed symmetric KL divergence;
* a 10-entry dominant-color palette (median cut), compared with CIEDE2000
  under a minimum-cost matching of entries.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

# sRGB primaries, D65, 2 degree observer
_M_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_M_XYZ_TO_RGB = np.linalg.inv(_M_RGB_TO_XYZ)
# white point taken from the matrix rows so that (255,255,255) is exactly achromatic
_WHITE = _M_RGB_TO_XYZ.sum(axis=1)

_EPSILON = 216.0 / 24389.0
_KAPPA = 24389.0 / 27.0

NUM_BINS = 313
BIN_STEP = 10.0
PALETTE_SIZE = 10
KL_EPS = 1e-8

# A grid center is kept when it lies within this many ab units of the 8-bit
# sRGB gamut.  Every radius in [13.73, 14.16) gives 313 centers.
_GAMUT_RADIUS = 13.95
_GRID_EXTENT = 110


# ---------------------------------------------------------------------------
# Lab conversion
# ---------------------------------------------------------------------------

def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.maximum(c, 0.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def rgb_to_lab(rgb) -> np.ndarray:
    """Convert sRGB values in [0, 255] to CIE Lab.

    Accepts any array with a trailing axis of length 3 and returns float64
    of the same shape.
    """
    rgb = np.asarray(rgb, dtype=np.float64) / 255.0
    xyz = _srgb_to_linear(rgb) @ _M_RGB_TO_XYZ.T / _WHITE
    f = np.where(xyz > _EPSILON, np.cbrt(xyz), (_KAPPA * xyz + 16.0) / 116.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_linear_rgb(lab) -> np.ndarray:
    """Lab to linear-light RGB in [0, 1] nominal range, without clipping."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    xyz = np.where(f ** 3 > _EPSILON, f ** 3, (116.0 * f - 16.0) / _KAPPA) * _WHITE
    return xyz @ _M_XYZ_TO_RGB.T


def lab_to_rgb(lab) -> np.ndarray:
    """Lab to sRGB floats in [0, 255], clipped to the cube."""
    lin = np.clip(lab_to_linear_rgb(lab), 0.0, 1.0)
    return np.clip(_linear_to_srgb(lin) * 255.0, 0.0, 255.0)


def in_gamut(lab, tol: float = 1e-9) -> np.ndarray:
    lin = lab_to_linear_rgb(lab)
    return np.all((lin >= -tol) & (lin <= 1.0 + tol), axis=-1)


# ---------------------------------------------------------------------------
# Quantizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantizerGrid:
    bin_centers: np.ndarray  # (313, 2) float64, row-major by a then b
    bin_step: float = BIN_STEP
    _tree: cKDTree = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.bin_centers)

    def assign(self, ab: np.ndarray) -> np.ndarray:
        """Index of the nearest bin center for each ab pair (lowest index on ties)."""
        ab = np.asarray(ab, dtype=np.float64).reshape(-1, 2)
        if len(ab) == 0:
            return np.zeros(0, dtype=np.intp)
        # kd-tree gives candidates; exact ties are resolved by a dense check
        # over the few nearest candidates
        dist, idx = self._tree.query(ab, k=4)
        best = dist[:, :1]
        tied = np.isclose(dist, best, rtol=0.0, atol=1e-9)
        cand = np.where(tied, idx, np.iinfo(np.intp).max)
        return cand.min(axis=1)


def gamut_surface_ab() -> np.ndarray:
    """ab coordinates of every color on the surface of the 8-bit sRGB cube."""
    v = np.arange(256, dtype=np.float64)
    a, b = np.meshgrid(v, v, indexing="ij")
    faces = []
    for fixed in (0.0, 255.0):
        for axis in range(3):
            chans = [a.ravel(), b.ravel()]
            chans.insert(axis, np.full(a.size, fixed))
            faces.append(np.stack(chans, axis=-1))
    return rgb_to_lab(np.concatenate(faces))[:, 1:]


@functools.lru_cache(maxsize=1)
def build_quantizer() -> QuantizerGrid:
    """Build the 313-bin ab quantizer.

    Candidate centers sit on a 10-unit grid over [-110, 110]^2.  The ab
    projection of the sRGB solid equals the projection of its surface, so
    distances are measured to the sampled cube faces.
    """
    axis = np.arange(-_GRID_EXTENT, _GRID_EXTENT + 1, BIN_STEP)
    aa, bb = np.meshgrid(axis, axis, indexing="ij")
    grid = np.stack([aa.ravel(), bb.ravel()], axis=-1)
    dist, _ = cKDTree(gamut_surface_ab()).query(grid)
    centers = grid[dist <= _GAMUT_RADIUS]
    if len(centers) != NUM_BINS:
        raise RuntimeError(
            f"gamut filter produced {len(centers)} bins, expected {NUM_BINS}"
        )
    return QuantizerGrid(centers, BIN_STEP, cKDTree(centers))


# ---------------------------------------------------------------------------
# Color features
# ---------------------------------------------------------------------------

def _unique_colors(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distinct RGB triplets of an image and their pixel counts."""
    flat = np.asarray(rgb, dtype=np.uint8).reshape(-1, 3)
    packed = (flat[:, 0].astype(np.uint32) << 16) | (flat[:, 1].astype(np.uint32) << 8) | flat[:, 2]
    keys, counts = np.unique(packed, return_counts=True)
    colors = np.stack([(keys >> 16) & 255, (keys >> 8) & 255, keys & 255], axis=-1)
    return colors.astype(np.uint8), counts


def extract_distribution(rgb: np.ndarray, grid: QuantizerGrid | None = None) -> np.ndarray:
    """Hard nearest-bin histogram of the image's ab values, normalized to sum 1."""
    grid = grid or build_quantizer()
    colors, counts = _unique_colors(rgb)
    if len(colors) == 0:
        raise ValueError("empty image")
    bins = grid.assign(rgb_to_lab(colors)[:, 1:])
    hist = np.bincount(bins, weights=counts, minlength=len(grid))
    return hist / hist.sum()


@dataclass(frozen=True)
class Palette:
    colors: np.ndarray  # (10, 3) uint8
    weights: np.ndarray  # (10,) float, descending, sums to 1

    def __post_init__(self):
        if self.colors.shape != (PALETTE_SIZE, 3) or self.weights.shape != (PALETTE_SIZE,):
            raise ValueError("palette must have exactly 10 entries")

    def __eq__(self, other):
        if not isinstance(other, Palette):
            return NotImplemented
        return np.array_equal(self.colors, other.colors) and np.array_equal(self.weights, other.weights)

    __hash__ = None

    @classmethod
    def gray(cls) -> Palette:
        colors = np.full((PALETTE_SIZE, 3), 128, dtype=np.uint8)
        weights = np.zeros(PALETTE_SIZE)
        weights[0] = 1.0
        return cls(colors, weights)


def _median_cut(colors: np.ndarray, counts: np.ndarray, n_boxes: int) -> list[tuple[np.ndarray, np.ndarray]]:
    boxes = [(colors, counts)]
    while len(boxes) < n_boxes:
        splittable = [i for i, (c, _) in enumerate(boxes) if len(c) > 1]
        if not splittable:
            break
        # most populated box first; earlier boxes win ties
        i = max(splittable, key=lambda j: (boxes[j][1].sum(), -j))
        c, n = boxes.pop(i)
        spans = c.max(axis=0).astype(int) - c.min(axis=0).astype(int)
        axis = int(np.argmax(spans))
        order = np.lexsort((c[:, (axis + 2) % 3], c[:, (axis + 1) % 3], c[:, axis]))
        c, n = c[order], n[order]
        cum = np.cumsum(n)
        cut = int(np.searchsorted(cum, cum[-1] / 2.0, side="left")) + 1
        cut = min(max(cut, 1), len(c) - 1)
        boxes[i:i] = [(c[:cut], n[:cut]), (c[cut:], n[cut:])]
    return boxes


def extract_palette(rgb: np.ndarray) -> Palette:
    """Ten dominant colors by median cut, ordered by pixel share."""
    colors, counts = _unique_colors(rgb)
    if len(colors) == 0:
        raise ValueError("empty image")
    entries = []
    for c, n in _median_cut(colors, counts, PALETTE_SIZE):
        total = n.sum()
        mean = (c.astype(np.float64) * n[:, None]).sum(axis=0) / total
        entries.append((total, tuple(np.floor(mean + 0.5).astype(int))))
    entries.sort(key=lambda e: (-e[0], e[1]))
    out_colors = [e[1] for e in entries]
    out_weights = [float(e[0]) for e in entries]
    while len(out_colors) < PALETTE_SIZE:
        out_colors.append(out_colors[-1])
        out_weights.append(0.0)
    weights = np.array(out_weights)
    return Palette(np.array(out_colors, dtype=np.uint8), weights / weights.sum())


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def _smooth(p: np.ndarray, eps: float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64) + eps
    return p / p.sum(axis=-1, keepdims=True)


def sym_kl(p, q, eps: float = KL_EPS) -> float:
    """KL(p||q) + KL(q||p) after adding ``eps`` to every bin of both arguments."""
    ps, qs = _smooth(p, eps), _smooth(q, eps)
    return float(np.sum((ps - qs) * (np.log(ps) - np.log(qs))))


def sym_kl_many(ps: np.ndarray, q: np.ndarray, eps: float = KL_EPS) -> np.ndarray:
    """sym_kl of each row of ``ps`` against ``q``."""
    ps, qs = _smooth(ps, eps), _smooth(q, eps)
    return np.sum((ps - qs) * (np.log(ps) - np.log(qs)), axis=-1)


def ciede2000(lab1, lab2, kL: float = 1.0, kC: float = 1.0, kH: float = 1.0):
    """CIEDE2000 color difference; broadcasts over leading axes."""
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    L1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    L2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    C_bar = (np.hypot(a1, b1) + np.hypot(a2, b2)) / 2.0
    C7 = C_bar ** 7
    G = 0.5 * (1.0 - np.sqrt(C7 / (C7 + 25.0 ** 7)))
    a1p, a2p = (1.0 + G) * a1, (1.0 + G) * a2
    C1p, C2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0
    chroma_zero = (C1p * C2p) == 0

    dLp = L2 - L1
    dCp = C2p - C1p
    dh = h2p - h1p
    dh = np.where(dh > 180.0, dh - 360.0, np.where(dh < -180.0, dh + 360.0, dh))
    dh = np.where(chroma_zero, 0.0, dh)
    dHp = 2.0 * np.sqrt(C1p * C2p) * np.sin(np.radians(dh) / 2.0)

    Lp_bar = (L1 + L2) / 2.0
    Cp_bar = (C1p + C2p) / 2.0
    hsum = h1p + h2p
    hp_bar = np.where(
        np.abs(h1p - h2p) <= 180.0,
        hsum / 2.0,
        np.where(hsum < 360.0, (hsum + 360.0) / 2.0, (hsum - 360.0) / 2.0),
    )
    hp_bar = np.where(chroma_zero, hsum, hp_bar)

    T = (1.0
         - 0.17 * np.cos(np.radians(hp_bar - 30.0))
         + 0.24 * np.cos(np.radians(2.0 * hp_bar))
         + 0.32 * np.cos(np.radians(3.0 * hp_bar + 6.0))
         - 0.20 * np.cos(np.radians(4.0 * hp_bar - 63.0)))
    d_theta = 30.0 * np.exp(-(((hp_bar - 275.0) / 25.0) ** 2))
    Cp7 = Cp_bar ** 7
    R_C = 2.0 * np.sqrt(Cp7 / (Cp7 + 25.0 ** 7))
    S_L = 1.0 + 0.015 * (Lp_bar - 50.0) ** 2 / np.sqrt(20.0 + (Lp_bar - 50.0) ** 2)
    S_C = 1.0 + 0.045 * Cp_bar
    S_H = 1.0 + 0.015 * Cp_bar * T
    R_T = -np.sin(np.radians(2.0 * d_theta)) * R_C

    tL = dLp / (kL * S_L)
    tC = dCp / (kC * S_C)
    tH = dHp / (kH * S_H)
    de = np.sqrt(tL ** 2 + tC ** 2 + tH ** 2 + R_T * tC * tH)
    return float(de) if de.ndim == 0 else de


def matched_delta_e(lab1: np.ndarray, lab2: np.ndarray) -> float:
    """Mean CIEDE2000 over the minimum-cost one-to-one matching of two equal-size color sets."""
    cost = ciede2000(np.asarray(lab1)[:, None, :], np.asarray(lab2)[None, :, :])
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def palette_distance(p1: Palette, p2: Palette) -> float:
    return matched_delta_e(rgb_to_lab(p1.colors), rgb_to_lab(p2.colors))


def color_distance(v1, v2) -> float:
    """Distance matching the feature variant: sym_kl or palette_distance."""
    if isinstance(v1, Palette):
        return palette_distance(v1, v2)
    return sym_kl(v1, v2)

