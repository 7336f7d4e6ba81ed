"""Sequential training loop: query, retrieve, triplet step on the projection, memory write."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .color_features import extract_distribution, extract_palette
from .embedder import GridDescriptor, Projection, project, project_backward
from .imaging import ImageSample, load_image
from .memory import (
    ValueMode,
    find_neighbors,
    find_neighbors_supervised,
    init_store,
    retrieve_knn,
    supervised_update,
    ttl_loss,
    update,
)

log = logging.getLogger(__name__)

DEFAULT_DELTA = {ValueMode.DISTRIBUTION: 1.0, ValueMode.PALETTE: 8.0, ValueMode.CLASS: 1.0}

@dataclass
class TrainConfig:
    delta: float | None = None  # None picks the value mode's default
    alpha: float = 0.1
    k: int = 16
    m: int = 512
    learning_rate: float = 0.01
    epochs: int = 10
    value_mode: ValueMode | str = ValueMode.DISTRIBUTION
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        self.value_mode = ValueMode.parse(self.value_mode)
        if self.delta is None:
            self.delta = DEFAULT_DELTA[self.value_mode]
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 1 <= self.k <= self.m:
            raise ValueError("k must satisfy 1 <= k <= m")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")


@dataclass
class EpochStats:
    mean_loss: float
    case_i: float
    case_ii: float
    skipped: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    updates: int = 0
    case_i: int = 0
    case_ii: int = 0
    degenerate: int = 0
    skipped_triplets: int = 0
    undecodable: int = 0

    def as_lines(self, timings: bool = False) -> list[str]:
        lines = [
            f"updates={self.updates}",
            f"case_i={self.case_i}",
            f"case_ii={self.case_ii}",
            f"degenerate={self.degenerate}",
            f"skipped_triplets={self.skipped_triplets}",
            f"undecodable={self.undecodable}",
        ]
        for i, e in enumerate(self.epochs, 1):
            lines += [
                f"epoch{i}.mean_loss={e.mean_loss:.6g}",
                f"epoch{i}.case_i_frac={e.case_i:.6g}",
                f"epoch{i}.case_ii_frac={e.case_ii:.6g}",
                f"epoch{i}.skipped_frac={e.skipped:.6g}",
            ]
            if timings:
                lines.append(f"epoch{i}.seconds={e.seconds:.3f}")
        return lines


def color_feature(sample: ImageSample, value_mode):
    mode = ValueMode.parse(value_mode)
    if mode is ValueMode.PALETTE:
        return extract_palette(sample.rgb)
    if mode is ValueMode.DISTRIBUTION:
        return extract_distribution(sample.rgb)
    raise ValueError("class-label stores take class ids, not color features")


def _decode(items) -> tuple[list[ImageSample], int]:
    samples, bad = [], 0
    for item in items:
        if isinstance(item, ImageSample):
            samples.append(item)
            continue
        try:
            samples.append(load_image(item))
        except Exception as exc:
            log.warning("skipping undecodable image %s: %s", item, exc)
            bad += 1
    return samples, bad


def _seeds(seed: int) -> tuple[int, int, int]:
    a, b, c = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(3))
    return a, b, c


def train(dataset, cfg: TrainConfig | None = None, *, embedder=None, class_ids=None,
          on_update=None, features=None, descriptors=None):
    """Train a fresh memory and projection on ``dataset``.

    ``dataset`` holds ImageSample objects or image paths.  ``class_ids`` is
    required for class-label stores and ignored otherwise.  ``on_update`` is
    called as ``on_update(sample_index, outcome)`` after every memory write.
    Precomputed ``features``/``descriptors`` (aligned with ``dataset``) skip
    extraction.

    Returns ``(store, projection, report)``.
    """
    cfg = cfg or TrainConfig()
    if features is None or descriptors is None:
        samples, bad = _decode(dataset)
    else:
        samples, bad = list(dataset), 0
    if not samples:
        raise ValueError("empty dataset")
    supervised = cfg.value_mode is ValueMode.CLASS
    if supervised:
        if class_ids is None or len(class_ids) != len(samples):
            raise ValueError("class-label training needs one class id per sample")
        values = [int(c) for c in class_ids]
    else:
        values = features if features is not None else [color_feature(s, cfg.value_mode) for s in samples]
    embedder = embedder or GridDescriptor()
    descs = descriptors if descriptors is not None else [embedder(s) for s in samples]

    store_seed, proj_seed, order_seed = _seeds(cfg.seed)
    store = init_store(cfg.m, cfg.value_mode, cfg.delta, store_seed)
    proj = Projection.init(proj_seed)
    order_rng = np.random.default_rng(order_seed)
    report = TrainReport(undecodable=bad)

    n = len(samples)
    for _ in range(cfg.epochs):
        t0 = time.perf_counter()
        order = order_rng.permutation(n) if cfg.shuffle else np.arange(n)
        losses, c1, c2, skipped = [], 0, 0, 0
        for i in order:
            desc, v = descs[i], values[i]
            q = project(desc, proj)
            result = retrieve_knn(store, q, cfg.k)
            if supervised:
                pair = find_neighbors_supervised(store, result, v)
            else:
                pair = find_neighbors(store, result, v)
            if pair.positive is None or pair.negative is None:
                skipped += 1
            else:
                loss, grad_q = ttl_loss(q, store.keys[pair.positive], store.keys[pair.negative], cfg.alpha)
                losses.append(loss)
                if loss > 0:
                    gW, gb = project_backward(desc, proj, grad_q)
                    proj.W -= cfg.learning_rate * gW
                    proj.b -= cfg.learning_rate * gb
                    q = project(desc, proj)
            outcome = supervised_update(store, q, v) if supervised else update(store, q, v)
            if outcome.case == 1:
                c1 += 1
            else:
                c2 += 1
            report.degenerate += outcome.degenerate
            if on_update is not None:
                on_update(int(i), outcome)
        report.updates += n
        report.case_i += c1
        report.case_ii += c2
        report.skipped_triplets += skipped
        report.epochs.append(EpochStats(
            mean_loss=float(np.mean(losses)) if losses else 0.0,
            case_i=c1 / n,
            case_ii=c2 / n,
            skipped=skipped / n,
            seconds=time.perf_counter() - t0,
        ))
    return store, proj, report
