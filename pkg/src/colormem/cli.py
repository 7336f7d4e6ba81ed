"""colormem command line.

Exit codes: 0 ok, 2 usage, 3 unreadable input, 4 output failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import memory as mem
from .embedder import Projection
from .eval import EpisodeSpec, few_shot_accuracy, hyperparameter_sweep, sweep_csv, top_k_csv, top_k_report
from .imaging import load_dataset, load_image, save_png, synthetic_corpus, write_corpus
from .memory import ValueMode
from .stylize import palette_colorize
from .trainer import TrainConfig, train

EXIT_USAGE, EXIT_INPUT, EXIT_OUTPUT = 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _csv_floats(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _csv_ints(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--value-mode", choices=["dist", "rgb"], default="dist")
    p.add_argument("--threshold", type=float, default=None, help="color threshold (default 1.0 dist, 8.0 rgb)")
    p.add_argument("--margin", type=float, default=0.1)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--mem-size", type=int, default=512)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)


def _config(args) -> TrainConfig:
    try:
        return TrainConfig(
            delta=args.threshold, alpha=args.margin, k=args.k, m=args.mem_size,
            learning_rate=args.lr, epochs=args.epochs, value_mode=args.value_mode, seed=args.seed,
        )
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None


def _load_images(directory):
    try:
        samples, failed = load_dataset(directory)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read dataset {directory}: {exc}") from None
    if not samples:
        raise CliError(EXIT_INPUT, f"no decodable images in {directory}")
    return samples, failed


def _read_memory(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        return mem.load(data)
    except mem.SnapshotError as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from None


def _read_image(path):
    try:
        return load_image(path)
    except Exception as exc:
        raise CliError(EXIT_INPUT, f"cannot decode {path}: {exc}") from None


def _write(path, data: bytes | str) -> None:
    try:
        if isinstance(data, str):
            Path(path).write_text(data)
        else:
            Path(path).write_bytes(data)
    except OSError as exc:
        raise CliError(EXIT_OUTPUT, f"cannot write {path}: {exc.strerror or exc}") from None


def _need_projection(proj, path):
    if proj is None:
        raise CliError(EXIT_INPUT, f"{path} has no projection block; rebuild it with 'build'")
    return proj


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_build(args) -> int:
    cfg = _config(args)
    samples, failed = _load_images(args.images)
    store, proj, report = train(samples, cfg)
    report.undecodable = len(failed)
    _write(args.out, mem.snapshot(store, proj))
    print(f"images={len(samples)}")
    print("\n".join(report.as_lines(timings=args.timings)))
    return 0


def cmd_query(args) -> int:
    store, proj = _read_memory(args.memory)
    proj = _need_projection(proj, args.memory)
    sample = _read_image(args.image)
    if not 1 <= args.top_k <= store.m:
        raise CliError(EXIT_USAGE, f"--top-k must be in [1, {store.m}]")
    sys.stdout.write(top_k_csv(top_k_report(store, proj, sample, args.top_k)))
    return 0


def cmd_colorize(args) -> int:
    store, proj = _read_memory(args.memory)
    proj = _need_projection(proj, args.memory)
    if store.value_mode is ValueMode.CLASS:
        raise CliError(EXIT_INPUT, "class-label memories hold no color features")
    if not 1 <= args.slot <= store.m:
        raise CliError(EXIT_USAGE, f"--slot must be in [1, {store.m}]")
    sample = _read_image(args.image)
    row = top_k_report(store, proj, sample, args.slot)[-1]
    out = palette_colorize(sample.gray, row.feature)
    try:
        save_png(out, args.out)
    except OSError as exc:
        raise CliError(EXIT_OUTPUT, f"cannot write {args.out}: {exc.strerror or exc}") from None
    print(f"slot={row.slot}")
    print(f"similarity={row.similarity:.6f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    samples, _ = _load_images(args.images)
    try:
        spec = EpisodeSpec(args.way, args.shot, args.queries_per_class, args.episodes, args.seed)
        report = few_shot_accuracy(samples, spec, cfg, args.mode)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    if args.csv:
        _write(args.csv, report.to_csv())
    print(f"mode={args.mode}")
    print(f"way={spec.way}")
    print(f"shot={spec.shot}")
    print(f"episodes={spec.episodes}")
    print(f"accuracy={report.accuracy:.6f}")
    if report.mean_color_error is not None:
        print(f"mean_color_error={report.mean_color_error:.6f}")
    return 0


def _holdout_split(samples, fraction: float, seed: int):
    if not 0 < fraction < 1:
        raise CliError(EXIT_USAGE, "--holdout must be in (0, 1)")
    if len(samples) < 2:
        raise CliError(EXIT_INPUT, "sweep needs at least two images")
    perm = np.random.default_rng(seed).permutation(len(samples))
    n_q = min(max(1, round(fraction * len(samples))), len(samples) - 1)
    queries = sorted(perm[:n_q])
    train_idx = sorted(perm[n_q:])
    return [samples[i] for i in train_idx], [samples[i] for i in queries]


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if not args.mem_sizes or not args.thresholds:
        raise CliError(EXIT_USAGE, "empty hyperparameter grid")
    if min(args.mem_sizes) < 1 or min(args.thresholds) <= 0:
        raise CliError(EXIT_USAGE, "memory sizes must be >= 1 and thresholds > 0")
    samples, _ = _load_images(args.images)
    tr, qs = _holdout_split(samples, args.holdout, args.seed)
    rows = hyperparameter_sweep(tr, qs, args.mem_sizes, args.thresholds, cfg)
    text = sweep_csv(rows)
    if args.csv:
        _write(args.csv, text)
    sys.stdout.write(text)
    return 0


# JSON interchange for export/import.  float32 values print exactly as the
# float64 they widen to, so the round trip is bit-exact.

def to_json(store: mem.MemoryStore, proj: Projection | None) -> dict:
    slots = []
    for i in range(store.m):
        if store.value_mode is ValueMode.PALETTE:
            value = {"colors": store.palette_colors[i].tolist(),
                     "weights": [float(w) for w in store.palette_weights[i]]}
        elif store.value_mode is ValueMode.CLASS:
            value = int(store.values[i])
        else:
            value = [float(x) for x in store.values[i]]
        slots.append({"key": [float(x) for x in store.keys[i]], "value": value, "age": int(store.ages[i])})
    doc = {
        "format": "MEMP",
        "version": mem.VERSION,
        "value_mode": store.value_mode.name.lower(),
        "delta": store.delta,
        "rng_state": store.rng_state,
        "slots": slots,
        "projection": None,
    }
    if proj is not None:
        W = np.asarray(proj.W, dtype=np.float32).astype(np.float64)
        b = np.asarray(proj.b, dtype=np.float32).astype(np.float64)
        doc["projection"] = {"W": W.tolist(), "b": b.tolist()}
    return doc


def from_json(doc: dict) -> tuple[mem.MemoryStore, Projection | None]:
    if doc.get("format") != "MEMP" or doc.get("version") != mem.VERSION:
        raise ValueError("not a MEMP JSON document")
    mode = ValueMode.parse(doc["value_mode"])
    slots = doc["slots"]
    m = len(slots)
    store = mem.init_store(m, mode, float(doc["delta"]), 0)
    store.rng_state = int(doc["rng_state"])
    store.keys[:] = np.array([s["key"] for s in slots], dtype=np.float32)
    store.ages[:] = [int(s["age"]) for s in slots]
    for i, s in enumerate(slots):
        v = s["value"]
        if mode is ValueMode.PALETTE:
            store.palette_colors[i] = np.array(v["colors"], dtype=np.uint8)
            store.palette_weights[i] = np.array(v["weights"], dtype=np.float32)
        elif mode is ValueMode.CLASS:
            store.values[i] = int(v)
        else:
            store.values[i] = np.array(v, dtype=np.float32)
    proj = None
    if doc.get("projection") is not None:
        proj = Projection(np.array(doc["projection"]["W"], dtype=np.float32).astype(np.float64),
                          np.array(doc["projection"]["b"], dtype=np.float32).astype(np.float64))
    return store, proj


def cmd_export(args) -> int:
    store, proj = _read_memory(args.memory)
    _write(args.out, json.dumps(to_json(store, proj)))
    return 0


def cmd_import(args) -> int:
    try:
        doc = json.loads(Path(args.input).read_text())
        store, proj = from_json(doc)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {args.input}: {exc.strerror or exc}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(EXIT_INPUT, f"{args.input}: malformed export: {exc}") from None
    _write(args.out, mem.snapshot(store, proj))
    return 0


def _age_histogram(ages: np.ndarray) -> str:
    buckets = {}
    for a in ages.tolist():
        lo = 0 if a == 0 else 1 << (int(a).bit_length() - 1)
        buckets[lo] = buckets.get(lo, 0) + 1
    parts = []
    for lo in sorted(buckets):
        hi = 0 if lo == 0 else 2 * lo - 1
        label = str(lo) if lo == hi else f"{lo}-{hi}"
        parts.append(f"{label}:{buckets[lo]}")
    return ",".join(parts)


def _written_slots(store: mem.MemoryStore) -> int:
    fresh = mem.init_store(1, store.value_mode, store.delta, 0)
    if store.value_mode is ValueMode.PALETTE:
        same = np.all(store.palette_colors == fresh.palette_colors[0], axis=(1, 2)) & np.all(
            store.palette_weights == fresh.palette_weights[0], axis=1)
    elif store.value_mode is ValueMode.CLASS:
        same = store.values == fresh.values[0]
    else:
        same = np.all(store.values == fresh.values[0], axis=1)
    return int((~same).sum())


def cmd_stats(args) -> int:
    if args.gen_synthetic:
        if args.classes < 1 or args.per_class < 1:
            raise CliError(EXIT_USAGE, "--classes and --per-class must be positive")
        samples = synthetic_corpus(args.classes, args.per_class, args.seed,
                                   consistent_color=not args.random_colors)
        try:
            write_corpus(samples, args.gen_synthetic)
        except OSError as exc:
            raise CliError(EXIT_OUTPUT, f"cannot write corpus: {exc.strerror or exc}") from None
        print(f"images={len(samples)}")
        print(f"classes={args.classes}")
        return 0
    if not args.memory:
        raise CliError(EXIT_USAGE, "stats needs --memory FILE or --gen-synthetic DIR")
    store, proj = _read_memory(args.memory)
    norms = np.linalg.norm(store.keys.astype(np.float64), axis=1)
    print(f"m={store.m}")
    print(f"value_mode={store.value_mode.name.lower()}")
    print(f"delta={store.delta:g}")
    print(f"written_slots={_written_slots(store)}")
    print(f"age_histogram={_age_histogram(store.ages)}")
    print(f"max_age={int(store.ages.max())}")
    print(f"key_norm_min={norms.min():.9f}")
    print(f"key_norm_max={norms.max():.9f}")
    print(f"projection={'yes' if proj is not None else 'no'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="colormem", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="train a memory on an image directory")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--timings", action="store_true", help="include wall-clock seconds in the report")
    _add_train_flags(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("query", help="rank the top-k memory slots for an image (CSV)")
    p.add_argument("--memory", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--top-k", type=int, default=3)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("colorize", help="colorize an image with a retrieved color feature")
    p.add_argument("--memory", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slot", type=int, default=1, help="rank of the retrieved slot to use (1 = top)")
    p.set_defaults(func=cmd_colorize)

    p = sub.add_parser("eval", help="N-way K-shot slot-class accuracy")
    p.add_argument("--images", required=True, help="directory with labels.tsv")
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=5)
    p.add_argument("--queries-per-class", type=int, default=5)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--mode", choices=["unsupervised", "supervised"], default="unsupervised")
    p.add_argument("--csv", help="write per-episode accuracies here")
    _add_train_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="retrieval color error over a memory-size x threshold grid")
    p.add_argument("--images", required=True)
    p.add_argument("--mem-sizes", type=_csv_ints, default=[64, 512])
    p.add_argument("--thresholds", type=_csv_floats, default=[0.5, 1.0, 2.0])
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--csv", help="also write the table here")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export", help="write a snapshot as JSON")
    p.add_argument("--memory", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("import", help="convert an exported JSON document back to a snapshot")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("stats", help="summarize a snapshot, or generate a synthetic corpus")
    p.add_argument("--memory")
    p.add_argument("--gen-synthetic", metavar="DIR")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--random-colors", action="store_true", help="arbitrary color per image")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"colormem: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
