"""Key/value/age memory with threshold-based neighbor selection and LRU writes.

Keys are unit vectors compared to queries by dot product.  Values are color
features (a 313-bin ab distribution or a 10-entry palette) or, for the
supervised baseline, integer class ids.  All persistent arrays are float32
so that the on-disk snapshot reproduces a store bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .color_features import NUM_BINS, PALETTE_SIZE, Palette, palette_distance, sym_kl_many
from .embedder import DIM, Projection

UNCLASSED = 0xFFFFFFFF
_DEGENERATE_NORM = 1e-8


class ValueMode(IntEnum):
    DISTRIBUTION = 0
    PALETTE = 1
    CLASS = 2

    @classmethod
    def parse(cls, s) -> ValueMode:
        if isinstance(s, cls):
            return s
        aliases = {"dist": cls.DISTRIBUTION, "distribution": cls.DISTRIBUTION,
                   "rgb": cls.PALETTE, "palette": cls.PALETTE,
                   "class": cls.CLASS, "class-label": cls.CLASS}
        try:
            return aliases[str(s).lower()]
        except KeyError:
            raise ValueError(f"unknown value mode {s!r}") from None


def _draw_index(state: int, n: int) -> tuple[int, int]:
    """Uniform index in [0, n) from a 64-bit state; returns (index, next state)."""
    g = np.random.default_rng(state)
    idx = int(g.integers(n))
    return idx, int(g.integers(0, 2 ** 64, dtype=np.uint64))


@dataclass
class MemoryStore:
    keys: np.ndarray  # (m, 512) float32, unit rows
    values: np.ndarray  # (m, 313) float32 | (m,) uint32 class ids
    ages: np.ndarray  # (m,) int64
    value_mode: ValueMode
    delta: float
    rng_state: int
    palette_colors: np.ndarray | None = None  # (m, 10, 3) uint8 in palette mode
    palette_weights: np.ndarray | None = None  # (m, 10) float32 in palette mode

    @property
    def m(self) -> int:
        return len(self.keys)

    def value(self, i: int):
        if self.value_mode is ValueMode.PALETTE:
            return Palette(self.palette_colors[i].copy(), self.palette_weights[i].astype(np.float64))
        if self.value_mode is ValueMode.CLASS:
            return int(self.values[i])
        return self.values[i].astype(np.float64)

    def set_value(self, i: int, v) -> None:
        if self.value_mode is ValueMode.PALETTE:
            if not isinstance(v, Palette):
                raise TypeError("palette-mode store needs a Palette value")
            self.palette_colors[i] = v.colors
            self.palette_weights[i] = v.weights
        elif self.value_mode is ValueMode.CLASS:
            self.values[i] = int(v)
        else:
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (NUM_BINS,):
                raise ValueError(f"distribution value must have {NUM_BINS} bins")
            self.values[i] = (v / v.sum()).astype(np.float32)

    def distances(self, indices, v) -> np.ndarray:
        """Color distance from each listed slot's value to ``v``."""
        indices = np.asarray(indices, dtype=np.intp)
        if self.value_mode is ValueMode.DISTRIBUTION:
            return sym_kl_many(self.values[indices].astype(np.float64), v)
        if self.value_mode is ValueMode.PALETTE:
            return np.array([palette_distance(self.value(i), v) for i in indices])
        raise TypeError("class-label stores have no color distance")

    def copy(self) -> MemoryStore:
        return MemoryStore(
            self.keys.copy(), self.values.copy(), self.ages.copy(), self.value_mode,
            self.delta, self.rng_state,
            None if self.palette_colors is None else self.palette_colors.copy(),
            None if self.palette_weights is None else self.palette_weights.copy(),
        )


def init_store(m: int, value_mode="distribution", delta: float = 1.0, seed: int = 0) -> MemoryStore:
    """Fresh store: seeded random unit keys, neutral values, zero ages."""
    if m < 1:
        raise ValueError("memory size must be at least 1")
    if not delta > 0:
        raise ValueError("threshold must be positive")
    mode = ValueMode.parse(value_mode)
    g = np.random.default_rng(seed)
    keys = g.standard_normal((m, DIM))
    keys = (keys / np.linalg.norm(keys, axis=1, keepdims=True)).astype(np.float32)
    state = int(g.integers(0, 2 ** 64, dtype=np.uint64))
    ages = np.zeros(m, dtype=np.int64)
    if mode is ValueMode.DISTRIBUTION:
        values = np.full((m, NUM_BINS), 1.0 / NUM_BINS, dtype=np.float32)
        return MemoryStore(keys, values, ages, mode, float(delta), state)
    if mode is ValueMode.CLASS:
        values = np.full(m, UNCLASSED, dtype=np.uint32)
        return MemoryStore(keys, values, ages, mode, float(delta), state)
    gray = Palette.gray()
    colors = np.broadcast_to(gray.colors, (m, PALETTE_SIZE, 3)).copy()
    weights = np.broadcast_to(gray.weights.astype(np.float32), (m, PALETTE_SIZE)).copy()
    return MemoryStore(keys, np.zeros(0, np.float32), ages, mode, float(delta), state, colors, weights)


# ---------------------------------------------------------------------------
# Retrieval and neighbor selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalResult:
    indices: np.ndarray
    similarities: np.ndarray


def retrieve_knn(store: MemoryStore, q, k: int) -> RetrievalResult:
    """The ``k`` slots with largest ``q . K[i]``; equal similarities keep slot order."""
    if not 1 <= k <= store.m:
        raise ValueError(f"k must be in [1, {store.m}], got {k}")
    sims = store.keys.astype(np.float64) @ np.asarray(q, dtype=np.float64)
    order = np.argsort(-sims, kind="stable")[:k]
    return RetrievalResult(order, sims[order])


@dataclass(frozen=True)
class NeighborPair:
    positive: int | None
    negative: int | None


def find_neighbors(store: MemoryStore, result: RetrievalResult, v) -> NeighborPair:
    """Highest-ranked slot within the color threshold of ``v`` and highest-ranked beyond it.

    A distance exactly equal to the threshold counts as neither.
    """
    d = store.distances(result.indices, v)
    pos = np.flatnonzero(d < store.delta)
    neg = np.flatnonzero(d > store.delta)
    return NeighborPair(
        int(result.indices[pos[0]]) if len(pos) else None,
        int(result.indices[neg[0]]) if len(neg) else None,
    )


def find_neighbors_supervised(store: MemoryStore, result: RetrievalResult, label: int) -> NeighborPair:
    same = store.values[result.indices] == label
    pos, neg = np.flatnonzero(same), np.flatnonzero(~same)
    return NeighborPair(
        int(result.indices[pos[0]]) if len(pos) else None,
        int(result.indices[neg[0]]) if len(neg) else None,
    )


def ttl_loss(q, key_pos, key_neg, alpha: float) -> tuple[float, np.ndarray]:
    """Hinge ``max(q.k_neg - q.k_pos + alpha, 0)`` and its gradient w.r.t. ``q``."""
    q = np.asarray(q, dtype=np.float64)
    kp = np.asarray(key_pos, dtype=np.float64)
    kn = np.asarray(key_neg, dtype=np.float64)
    z = q @ kn - q @ kp + alpha
    if z > 0:
        return float(z), kn - kp
    return 0.0, np.zeros_like(q)


# ---------------------------------------------------------------------------
# Updates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UpdateOutcome:
    case: int  # 1: key of the top-1 slot averaged; 2: oldest slot overwritten
    slot: int
    degenerate: bool = False  # case 1 was taken but the averaged key vanished


def _write_oldest(store: MemoryStore, q, v) -> int:
    oldest = np.flatnonzero(store.ages == store.ages.max())
    pick, store.rng_state = _draw_index(store.rng_state, len(oldest))
    slot = int(oldest[pick])
    store.keys[slot] = np.asarray(q, dtype=np.float32)
    store.set_value(slot, v)
    return slot


def _apply(store: MemoryStore, q, v, matched: bool, n1: int) -> UpdateOutcome:
    q = np.asarray(q, dtype=np.float64)
    degenerate = False
    if matched:
        s = q + store.keys[n1].astype(np.float64)
        norm = np.linalg.norm(s)
        if norm > _DEGENERATE_NORM:
            store.keys[n1] = (s / norm).astype(np.float32)
            store.ages += 1
            store.ages[n1] = 0
            return UpdateOutcome(1, n1)
        degenerate = True
    slot = _write_oldest(store, q, v)
    store.ages += 1
    store.ages[slot] = 0
    return UpdateOutcome(2, slot, degenerate)


def update(store: MemoryStore, q, v) -> UpdateOutcome:
    """Write ``(q, v)`` into memory.

    If the top-1 slot's value lies within the threshold of ``v`` its key is
    averaged with ``q`` and renormalized; otherwise a uniformly chosen slot of
    maximal age is overwritten.  Every other slot ages by one.
    """
    n1 = int(retrieve_knn(store, q, 1).indices[0])
    matched = bool(store.distances([n1], v)[0] < store.delta)
    return _apply(store, q, v, matched, n1)


def supervised_update(store: MemoryStore, q, label: int) -> UpdateOutcome:
    if store.value_mode is not ValueMode.CLASS:
        raise TypeError("supervised updates need a class-label store")
    n1 = int(retrieve_knn(store, q, 1).indices[0])
    return _apply(store, q, label, int(store.values[n1]) == int(label), n1)


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

MAGIC = b"MEMP"
VERSION = 1
_HEADER = struct.Struct("<4sHBBIIdQ")
HEADER_SIZE = _HEADER.size

_PALETTE_ENTRY = np.dtype([("rgb", "u1", (3,)), ("w", "<f4")])


class SnapshotError(ValueError):
    def __init__(self, reason: str, offset: int):
        super().__init__(f"{reason} at offset {offset}")
        self.reason = reason
        self.offset = offset


def _record_dtype(mode: ValueMode) -> np.dtype:
    value = {
        ValueMode.DISTRIBUTION: ("value", "<f4", (NUM_BINS,)),
        ValueMode.PALETTE: ("value", _PALETTE_ENTRY, (PALETTE_SIZE,)),
        ValueMode.CLASS: ("value", "<u4"),
    }[mode]
    return np.dtype([("key", "<f4", (DIM,)), value, ("age", "<u8")])


def projection_block_size(dim: int = DIM) -> int:
    return dim * dim * 4 + dim * 4


def snapshot(store: MemoryStore, projection: Projection | None = None) -> bytes:
    """Serialize a store, optionally followed by the projection extension block."""
    header = _HEADER.pack(MAGIC, VERSION, int(store.value_mode), 0, store.m, DIM,
                          float(store.delta), int(store.rng_state))
    rec = np.zeros(store.m, dtype=_record_dtype(store.value_mode))
    rec["key"] = store.keys
    rec["age"] = store.ages.astype(np.uint64)
    if store.value_mode is ValueMode.PALETTE:
        rec["value"]["rgb"] = store.palette_colors
        rec["value"]["w"] = store.palette_weights
    else:
        rec["value"] = store.values
    parts = [header, rec.tobytes()]
    if projection is not None:
        parts.append(np.asarray(projection.W, dtype="<f4").tobytes())
        parts.append(np.asarray(projection.b, dtype="<f4").tobytes())
    return b"".join(parts)


def load(data: bytes) -> tuple[MemoryStore, Projection | None]:
    """Parse a snapshot; returns the store and the projection if one is appended."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        if data[:4] != MAGIC[:len(data[:4])]:
            raise SnapshotError("bad magic", 0)
        raise SnapshotError(f"truncated header: {len(data)} of {HEADER_SIZE} bytes", len(data))
    magic, version, mode, reserved, m, dim, delta, state = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise SnapshotError("bad magic", 0)
    if version != VERSION:
        raise SnapshotError(f"unsupported version {version}", 4)
    try:
        mode = ValueMode(mode)
    except ValueError:
        raise SnapshotError(f"unknown value mode {mode}", 6) from None
    if reserved != 0:
        raise SnapshotError("reserved byte is not zero", 7)
    if m < 1:
        raise SnapshotError("memory size is zero", 8)
    if dim != DIM:
        raise SnapshotError(f"key dimension {dim} != {DIM}", 12)
    if not delta > 0:
        raise SnapshotError("threshold is not positive", 16)

    dtype = _record_dtype(mode)
    end = HEADER_SIZE + m * dtype.itemsize
    if len(data) < end:
        slot = (len(data) - HEADER_SIZE) // dtype.itemsize
        raise SnapshotError(f"truncated record {slot}", HEADER_SIZE + slot * dtype.itemsize)
    rec = np.frombuffer(data, dtype=dtype, count=m, offset=HEADER_SIZE)

    keys = rec["key"].astype(np.float32)
    ages = rec["age"].astype(np.int64)
    if mode is ValueMode.PALETTE:
        store = MemoryStore(keys, np.zeros(0, np.float32), ages, mode, delta, state,
                            rec["value"]["rgb"].astype(np.uint8), rec["value"]["w"].astype(np.float32))
    else:
        values = rec["value"].astype(np.float32 if mode is ValueMode.DISTRIBUTION else np.uint32)
        store = MemoryStore(keys, values, ages, mode, delta, state)

    rest = len(data) - end
    if rest == 0:
        return store, None
    if rest != projection_block_size():
        raise SnapshotError(f"{rest} trailing bytes are not a projection block", end)
    W = np.frombuffer(data, dtype="<f4", count=DIM * DIM, offset=end).reshape(DIM, DIM)
    b = np.frombuffer(data, dtype="<f4", count=DIM, offset=end + DIM * DIM * 4)
    return store, Projection(W.astype(np.float64), b.astype(np.float64))


def restore(data: bytes) -> MemoryStore:
    return load(data)[0]
