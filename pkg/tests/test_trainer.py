import numpy as np
import pytest

from colormem.color_features import extract_distribution, sym_kl
from colormem.embedder import describe, project
from colormem.eval import train_tagged
from colormem.imaging import ImageSample, grayscale, save_png, synthetic_image
from colormem.memory import ValueMode, retrieve_knn, snapshot
from colormem.trainer import TrainConfig, TrainReport, color_feature, train


class TestGrayscale:
    def test_examples(self):
        px = np.array([[[255, 255, 255], [0, 0, 0], [255, 0, 0]]], np.uint8)
        assert grayscale(px).tolist() == [[255, 0, 76]]

    def test_half_rounds_up(self):
        # single-channel inputs include exact .5 ties, e.g. 0.114 * 250 = 28.5
        for c in range(256):
            for w, ch in ((299, 0), (587, 1), (114, 2)):
                px = np.zeros((1, 1, 3), np.uint8)
                px[0, 0, ch] = c
                exact = w * c / 1000
                assert grayscale(px)[0, 0] == int(np.floor(exact + 0.5))


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.delta, cfg.alpha, cfg.k, cfg.m, cfg.learning_rate, cfg.epochs) == (1.0, 0.1, 16, 512, 0.01, 10)
        assert TrainConfig(value_mode="rgb").delta == 8.0

    @pytest.mark.parametrize("kw", [dict(delta=0), dict(alpha=-1), dict(k=0), dict(k=20, m=10),
                                    dict(learning_rate=0), dict(epochs=0), dict(value_mode="x")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def _uniform_images(n, color=(200, 60, 60)):
    rng = np.random.default_rng(0)
    return [ImageSample(synthetic_image(0, 2, rng, color=color), f"u{i}.png", "a") for i in range(n)]


def test_single_image_cold_start():
    s = _uniform_images(1)
    store, proj, report = train(s, TrainConfig(epochs=1, m=8, k=4))
    assert (report.case_i, report.case_ii, report.updates) == (0, 1, 1)
    q = project(describe(s[0].gray), proj)
    r = retrieve_knn(store, q, 1)
    assert r.similarities[0] == pytest.approx(1, abs=1e-6)
    assert sym_kl(store.value(int(r.indices[0])), extract_distribution(s[0].rgb)) < 1e-5


def test_uniform_class_converges():
    store, _, report = train(_uniform_images(6), TrainConfig(epochs=2, m=16, k=4))
    assert report.epochs[1].case_i == 1.0 and report.epochs[1].case_ii == 0.0


def test_deterministic(red_blue_corpus):
    train_set, _ = red_blue_corpus
    cfg = TrainConfig(epochs=2, m=32, k=8, seed=4)
    a, pa, ra = train(train_set, cfg)
    b, pb, rb = train(train_set, cfg)
    assert snapshot(a, pa) == snapshot(b, pb)
    assert ra.as_lines() == rb.as_lines()
    c, pc, _ = train(train_set, TrainConfig(epochs=2, m=32, k=8, seed=5))
    assert snapshot(c, pc) != snapshot(a, pa)


def test_red_blue_heldout_accuracy(red_blue_corpus):
    train_set, held = red_blue_corpus
    labels = [s.label for s in train_set]
    store, proj, _, tags = train_tagged(train_set, labels, TrainConfig())
    correct = sum(
        tags[int(retrieve_knn(store, project(describe(s.gray), proj), 1).indices[0])] == s.label
        for s in held
    )
    assert correct / len(held) >= 0.9


def test_loss_last_epoch_not_above_first(red_blue_corpus):
    train_set, _ = red_blue_corpus
    _, _, report = train(train_set, TrainConfig(m=16, k=8))
    assert report.epochs[-1].mean_loss <= report.epochs[0].mean_loss


def test_report_fractions(red_blue_corpus):
    train_set, _ = red_blue_corpus
    _, _, report = train(train_set, TrainConfig(epochs=3, m=64, k=16))
    for e in report.epochs:
        assert 0 <= e.skipped <= 1
        assert e.case_i + e.case_ii == pytest.approx(1.0)
    assert report.case_i + report.case_ii == report.updates == 3 * len(train_set)
    assert not any("seconds" in line for line in report.as_lines())
    assert any("seconds" in line for line in report.as_lines(timings=True))


def test_palette_mode_invariants(red_blue_corpus):
    train_set, _ = red_blue_corpus
    store, _, _ = train(train_set[::4], TrainConfig(value_mode="palette", epochs=2, m=8, k=4))
    assert store.value_mode is ValueMode.PALETTE
    assert np.allclose(np.linalg.norm(store.keys, axis=1), 1, atol=1e-6)


def test_distribution_invariants(red_blue_corpus):
    train_set, _ = red_blue_corpus
    store, _, _ = train(train_set, TrainConfig(epochs=2, m=16, k=8))
    assert np.allclose(np.linalg.norm(store.keys, axis=1), 1, atol=1e-6)
    assert np.allclose(store.values.sum(axis=1), 1, atol=1e-6)


def test_supervised_needs_ids():
    with pytest.raises(ValueError):
        train(_uniform_images(2), TrainConfig(value_mode="class"))
    store, _, report = train(_uniform_images(2), TrainConfig(value_mode="class", m=4, k=2, epochs=1),
                             class_ids=[3, 3])
    assert report.case_ii == 1 and report.case_i == 1
    assert sorted(store.values.tolist())[0] == 3


def test_paths_and_undecodable(tmp_path):
    s = _uniform_images(2)
    paths = []
    for x in s:
        save_png(x.rgb, tmp_path / x.name)
        paths.append(tmp_path / x.name)
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not an image")
    _, _, report = train(paths + [bad], TrainConfig(epochs=1, m=4, k=2))
    assert report.undecodable == 1 and report.updates == 2
    assert isinstance(report, TrainReport)


def test_empty_dataset():
    with pytest.raises(ValueError, match="empty"):
        train([], TrainConfig())


def test_color_feature_modes():
    s = _uniform_images(1)[0]
    assert color_feature(s, "dist").shape == (313,)
    assert color_feature(s, "palette").colors.shape == (10, 3)
    with pytest.raises(ValueError):
        color_feature(s, "class")
