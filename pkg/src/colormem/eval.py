"""N-way K-shot retrieval accuracy, hyperparameter sweeps and top-k reports."""

from __future__ import annotations

import csv
import io
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .color_features import color_distance
from .embedder import GridDescriptor, project
from .memory import MemoryStore, ValueMode, retrieve_knn
from .trainer import TrainConfig, color_feature, train


@dataclass
class EpisodeSpec:
    way: int = 5
    shot: int = 5
    queries_per_class: int = 5
    episodes: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.way < 2:
            raise ValueError("way must be at least 2")
        if self.shot < 1 or self.queries_per_class < 1 or self.episodes < 1:
            raise ValueError("shot, queries_per_class and episodes must be positive")


@dataclass
class EvalReport:
    accuracy: float
    episode_accuracies: list[float]
    mean_color_error: float | None
    confusion: Counter = field(default_factory=Counter)

    def to_csv(self) -> str:
        return rows_to_csv(["episode", "accuracy"],
                           [(i, f"{a:.6f}") for i, a in enumerate(self.episode_accuracies)])


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


class _Cache:
    """Per-sample descriptors and color features, computed once."""

    def __init__(self, samples, value_mode, embedder):
        self.samples = samples
        self.value_mode = value_mode
        self.embedder = embedder or GridDescriptor()
        self._desc, self._feat = {}, {}

    def desc(self, i):
        if i not in self._desc:
            self._desc[i] = self.embedder(self.samples[i])
        return self._desc[i]

    def feat(self, i):
        if i not in self._feat:
            self._feat[i] = color_feature(self.samples[i], self.value_mode)
        return self._feat[i]


def tag_slots(m: int, updates, labels) -> list:
    """Class of the last sample that wrote or matched each slot; None when untouched.

    ``updates`` is the ordered sequence of ``(sample_index, outcome)`` pairs
    produced during training and ``labels[sample_index]`` the sample's class.
    """
    tags = [None] * m
    for i, outcome in updates:
        tags[outcome.slot] = labels[i]
    return tags


def train_tagged(samples, labels, cfg: TrainConfig, **kw):
    """Train without labels in the loss, recording per-slot class tags for scoring."""
    updates = []
    store, proj, report = train(samples, cfg, on_update=lambda i, o: updates.append((i, o)), **kw)
    return store, proj, report, tag_slots(store.m, updates, labels)


def _group(samples) -> dict[str, list[int]]:
    groups = defaultdict(list)
    for i, s in enumerate(samples):
        if s.label is None:
            raise ValueError(f"sample {s.name or i} has no class label")
        groups[s.label].append(i)
    return dict(sorted(groups.items()))


def sample_episode(groups: dict[str, list[int]], spec: EpisodeSpec, rng) -> tuple[list[str], list[int], list[int]]:
    classes = sorted(groups)
    chosen = [classes[j] for j in sorted(rng.choice(len(classes), spec.way, replace=False))]
    support, queries = [], []
    for c in chosen:
        picked = rng.choice(groups[c], spec.shot + spec.queries_per_class, replace=False)
        support += [int(i) for i in picked[:spec.shot]]
        queries += [int(i) for i in picked[spec.shot:]]
    return chosen, support, queries


def few_shot_accuracy(samples, spec: EpisodeSpec, cfg: TrainConfig | None = None,
                      mode: str = "unsupervised", embedder=None, cache=None) -> EvalReport:
    """Top-1 slot-class accuracy averaged over seeded N-way K-shot episodes.

    Unsupervised mode trains on color features only; labels merely tag the
    slots for scoring.  Supervised mode stores class ids as values.
    """
    cfg = cfg or TrainConfig()
    if mode not in ("unsupervised", "supervised"):
        raise ValueError(f"unknown mode {mode!r}")
    groups = _group(samples)
    if len(groups) < spec.way:
        raise ValueError(f"dataset has {len(groups)} classes, need {spec.way}")
    need = spec.shot + spec.queries_per_class
    for c, idx in groups.items():
        if len(idx) < need:
            raise ValueError(f"class {c!r} has {len(idx)} images, need {need}")

    supervised = mode == "supervised"
    feat_mode = ValueMode.DISTRIBUTION if cfg.value_mode is ValueMode.CLASS else cfg.value_mode
    cache = cache or _Cache(samples, feat_mode, embedder)
    rng = np.random.default_rng(spec.seed)
    accs, errors, confusion = [], [], Counter()

    for ep in range(spec.episodes):
        chosen, support, queries = sample_episode(groups, spec, rng)
        ecfg = replace(cfg, seed=cfg.seed + ep)
        sup = [samples[i] for i in support]
        labels = [samples[i].label for i in support]
        descs = [cache.desc(i) for i in support]
        if supervised:
            ecfg = replace(ecfg, value_mode=ValueMode.CLASS, delta=1.0)
            ids = [chosen.index(l) for l in labels]
            store, proj, _ = train(sup, ecfg, class_ids=ids, features=[None] * len(sup), descriptors=descs)
            tags = [None if v == 0xFFFFFFFF else chosen[v] for v in store.values]
        else:
            store, proj, _, tags = train_tagged(
                sup, labels, ecfg, features=[cache.feat(i) for i in support], descriptors=descs)

        correct = 0
        for i in queries:
            top = int(retrieve_knn(store, project(cache.desc(i), proj), 1).indices[0])
            pred = tags[top]
            correct += pred == samples[i].label
            confusion[(samples[i].label, pred)] += 1
            if not supervised:
                errors.append(color_distance(store.value(top), cache.feat(i)))
        accs.append(correct / len(queries))

    return EvalReport(float(np.mean(accs)), accs, float(np.mean(errors)) if errors else None, confusion)


def retrieval_color_error(store: MemoryStore, proj, descs, features) -> float:
    """Mean color distance between each query's top-1 value and its own feature."""
    errs = []
    for d, f in zip(descs, features):
        top = int(retrieve_knn(store, project(d, proj), 1).indices[0])
        errs.append(color_distance(store.value(top), f))
    return float(np.mean(errs))


def hyperparameter_sweep(train_samples, query_samples, mem_sizes, deltas,
                         cfg: TrainConfig | None = None, embedder=None) -> list[tuple[int, float, float]]:
    """Train and score once per (m, delta) grid point; rows sorted by (m, delta)."""
    cfg = cfg or TrainConfig()
    grid = sorted({(int(m), float(d)) for m in mem_sizes for d in deltas})
    if not grid:
        raise ValueError("empty hyperparameter grid")
    embedder = embedder or GridDescriptor()
    t_desc = [embedder(s) for s in train_samples]
    t_feat = [color_feature(s, cfg.value_mode) for s in train_samples]
    q_desc = [embedder(s) for s in query_samples]
    q_feat = [color_feature(s, cfg.value_mode) for s in query_samples]
    rows = []
    for m, delta in grid:
        pcfg = replace(cfg, m=m, delta=delta, k=min(cfg.k, m))
        store, proj, _ = train(train_samples, pcfg, features=t_feat, descriptors=t_desc)
        rows.append((m, delta, retrieval_color_error(store, proj, q_desc, q_feat)))
    return rows


def sweep_csv(rows) -> str:
    return rows_to_csv(["m", "delta", "mean_color_error"], [(m, d, f"{e:.6f}") for m, d, e in rows])


@dataclass(frozen=True)
class TopKRow:
    rank: int
    slot: int
    similarity: float
    feature: object
    color_distance: float | None


def top_k_report(store: MemoryStore, proj, sample, k: int, embedder=None) -> list[TopKRow]:
    """Ranked top-k retrievals for one image, with distance to the image's own color feature."""
    embedder = embedder or GridDescriptor()
    result = retrieve_knn(store, project(embedder(sample), proj), k)
    truth = None if store.value_mode is ValueMode.CLASS else color_feature(sample, store.value_mode)
    rows = []
    for rank, (slot, sim) in enumerate(zip(result.indices, result.similarities), 1):
        value = store.value(int(slot))
        dist = None if truth is None else color_distance(value, truth)
        rows.append(TopKRow(rank, int(slot), float(sim), value, dist))
    return rows


def top_k_csv(rows: list[TopKRow]) -> str:
    return rows_to_csv(
        ["rank", "similarity", "color_distance"],
        [(r.rank, f"{r.similarity:.6f}", "" if r.color_distance is None else f"{r.color_distance:.6f}")
         for r in rows],
    )
