"""Targets, generators, persistence, and the image-set pipeline."""

import gzip
import struct

import numpy as np
import pytest

from laf.datasets import (
    TARGET_NAMES,
    IdxFormatError,
    TargetKind,
    ensure_mnist,
    gen_scalar_test,
    gen_scalar_train,
    load_scalar_samples,
    mnist_dir,
    mnist_load_idx,
    mnist_setify,
    save_scalar_samples,
    synthesize_idx,
    target_value,
    targets_batch,
)
from laf.ndcore import DomainError


def ref_target(kind: TargetKind, xs):
    """Naive python reference for every target."""
    xs = [float(v) for v in xs]
    n = len(xs)
    if kind.name == "count":
        return float(n)
    if kind.name == "sum":
        return float(sum(xs))
    if kind.name == "max":
        return max(xs)
    if kind.name == "min":
        return min(xs)
    if kind.name == "mean":
        return sum(xs) / n
    if kind.name == "median":
        s = sorted(xs)
        mid = n // 2
        return s[mid] if n % 2 else (s[mid - 1] + s[mid]) / 2.0
    if kind.name == "inverse_count":
        return 1.0 / n
    if kind.name == "moment":
        return sum(v ** kind.k for v in xs) / n
    mean = sum(xs) / n
    var = sum((v - mean) ** 2 for v in xs) / n
    std = var ** 0.5
    if std == 0.0:
        return 0.0
    w = [(v - mean) / std for v in xs]
    p = 3 if kind.name == "skewness" else 4
    return sum(v ** p for v in w) / n


ALL_KINDS = [TargetKind("moment", k) if name == "moment" else TargetKind(name)
             for name in TARGET_NAMES for k in ([1, 2, 3, 4] if name == "moment" else [0])]


class TestTargetKind:
    def test_label_parse_roundtrip(self):
        for kind in ALL_KINDS:
            assert TargetKind.parse(kind.label()) == kind

    def test_parse_errors(self):
        with pytest.raises(ValueError, match="unknown target"):
            TargetKind.parse("mode")
        with pytest.raises(ValueError, match="bad moment target"):
            TargetKind.parse("momentx")
        with pytest.raises(ValueError, match=">= 1"):
            TargetKind("moment", 0)

    def test_bare_moment_defaults_to_second(self):
        assert TargetKind.parse("moment") == TargetKind("moment", 2)


class TestTargetValue:
    def test_matches_naive_reference(self):
        rng = np.random.default_rng(0)
        for kind in ALL_KINDS:
            for _ in range(200):
                xs = rng.integers(0, 10, size=int(rng.integers(1, 11)))
                got = target_value(kind, xs)
                assert got == pytest.approx(ref_target(kind, xs),
                                            rel=1e-12, abs=1e-12)

    def test_median_conventions(self):
        med = TargetKind("median")
        assert target_value(med, [1, 3]) == 2.0
        assert target_value(med, [5]) == 5.0
        assert target_value(med, [9, 1, 9, 2]) == 5.5  # mean of two middles

    def test_integer_targets_are_exact(self):
        assert target_value(TargetKind("sum"), [3, 4, 9]) == 16.0
        assert target_value(TargetKind("count"), [0, 0]) == 2.0
        assert target_value(TargetKind("moment", 3), [2, 4]) == 36.0

    def test_constant_set_higher_moments(self):
        assert target_value(TargetKind("skewness"), [4, 4, 4]) == 0.0
        assert target_value(TargetKind("kurtosis"), [4, 4, 4]) == 0.0

    def test_empty_set_rejected(self):
        with pytest.raises(DomainError):
            target_value(TargetKind("sum"), [])


class TestTargetsBatch:
    def test_bit_exact_agreement_with_scalar_path(self):
        rng = np.random.default_rng(1)
        K = rng.integers(1, 11, size=300)
        flat = rng.integers(0, 10, size=int(K.sum()))
        offsets = np.concatenate([[0], np.cumsum(K)])
        for kind in ALL_KINDS:
            batch = targets_batch(kind, flat, offsets)
            for i in range(len(K)):
                xs = flat[offsets[i]:offsets[i + 1]]
                assert batch[i] == target_value(kind, xs)  # bitwise


class TestGenerators:
    def test_train_shapes_and_bounds(self):
        samples = gen_scalar_train(TargetKind("sum"), 500, M=10, seed=3)
        assert len(samples) == 500
        for s in samples:
            assert 2 <= len(s.elements) <= 10
            assert s.elements.dtype == np.int64
            assert np.all((s.elements >= 0) & (s.elements <= 9))
            assert s.label == target_value(TargetKind("sum"), s.elements)

    def test_train_determinism(self):
        a = gen_scalar_train(TargetKind("mean"), 100, M=8, seed=7)
        b = gen_scalar_train(TargetKind("mean"), 100, M=8, seed=7)
        c = gen_scalar_train(TargetKind("mean"), 100, M=8, seed=8)
        assert all(np.array_equal(x.elements, y.elements) and x.label == y.label
                   for x, y in zip(a, b))
        assert any(not np.array_equal(x.elements, y.elements)
                   for x, y in zip(a, c))

    def test_cardinality_is_uniform(self):
        # chi-square on K over {2..10}: df=8, 1% critical value 20.09
        samples = gen_scalar_train(TargetKind("count"), 10000, M=10, seed=0)
        counts = np.bincount([len(s.elements) for s in samples], minlength=11)[2:]
        expected = 10000 / 9
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 20.09

    def test_argument_validation(self):
        with pytest.raises(ValueError, match="M >= 2"):
            gen_scalar_train(TargetKind("sum"), 10, M=1)
        with pytest.raises(ValueError, match="n >= 1"):
            gen_scalar_test(TargetKind("sum"), 0, M=10)

    def test_test_set_is_stratified(self):
        test = gen_scalar_test(TargetKind("sum"), 1000, M=50, seed=0)
        assert test.stratified is True
        labels = np.array([s.label for s in test])
        hist, _ = np.histogram(labels, bins=20)
        assert hist.max() / 1000 < 0.30
        assert (hist > 0).sum() >= 15

    def test_stratification_flattens_concentrated_targets(self):
        # set means pile up near 4.5 under plain sampling (CLT); the
        # stratified draw spreads them across the attainable range
        kind = TargetKind("mean")
        plain = np.array([s.label for s in gen_scalar_train(kind, 1000, M=50, seed=0)])
        strat = np.array([s.label for s in gen_scalar_test(kind, 1000, M=50, seed=0)])
        lo, hi = min(plain.min(), strat.min()), max(plain.max(), strat.max())
        hp, _ = np.histogram(plain, bins=20, range=(lo, hi))
        hs, _ = np.histogram(strat, bins=20, range=(lo, hi))
        assert hp.max() > 2 * hs.max()

    def test_degenerate_target_falls_back(self):
        test = gen_scalar_test(TargetKind("count"), 50, M=2, seed=0)
        assert test.stratified is False
        assert all(s.label == 2.0 for s in test)

    def test_test_set_determinism(self):
        a = gen_scalar_test(TargetKind("max"), 200, M=10, seed=5)
        b = gen_scalar_test(TargetKind("max"), 200, M=10, seed=5)
        assert all(np.array_equal(x.elements, y.elements) and x.label == y.label
                   for x, y in zip(a, b))


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        samples = gen_scalar_train(TargetKind("skewness"), 50, seed=2)
        path = tmp_path / "sets.csv"
        save_scalar_samples(samples, path)
        back = load_scalar_samples(path)
        assert len(back) == 50
        for s, t in zip(samples, back):
            assert np.array_equal(s.elements, t.elements)
            assert s.label == t.label  # repr round-trips floats exactly

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "sets.csv"
        path.write_text("2,1,2,3.0\n\n1,7,7.0\n")
        assert len(load_scalar_samples(path)) == 2

    def test_bad_records_report_line_numbers(self, tmp_path):
        path = tmp_path / "sets.csv"
        path.write_text("2,1,2,3.0\n3,1,2,6.0\n")
        with pytest.raises(ValueError, match="line 2"):
            load_scalar_samples(path)
        path.write_text("x,1,2\n")
        with pytest.raises(ValueError, match="line 1"):
            load_scalar_samples(path)


class TestIdx:
    def _tiny(self, tmp_path, n_train=120, n_test=40, seed=0):
        return synthesize_idx(tmp_path, n_train=n_train, n_test=n_test, seed=seed)

    def test_synthesize_parse_roundtrip(self, tmp_path):
        paths = self._tiny(tmp_path)
        images, labels = mnist_load_idx(paths["train_images"], paths["train_labels"])
        assert images.shape == (120, 784) and labels.shape == (120,)
        assert images.dtype == np.float64
        assert images.min() >= 0.0 and images.max() <= 1.0
        assert set(np.unique(labels)) <= set(range(10))
        timages, tlabels = mnist_load_idx(paths["test_images"], paths["test_labels"])
        assert timages.shape == (40, 784)

    def test_gzip_transparent(self, tmp_path):
        paths = self._tiny(tmp_path)
        for key in ("train_images", "train_labels"):
            data = paths[key].read_bytes()
            with gzip.open(str(paths[key]) + ".gz", "wb") as fh:
                fh.write(data)
        a = mnist_load_idx(paths["train_images"], paths["train_labels"])
        b = mnist_load_idx(str(paths["train_images"]) + ".gz",
                           str(paths["train_labels"]) + ".gz")
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_bad_magic(self, tmp_path):
        img = tmp_path / "img"
        img.write_bytes(struct.pack(">iiii", 1234, 1, 28, 28) + b"\0" * 784)
        lab = tmp_path / "lab"
        lab.write_bytes(struct.pack(">ii", 2049, 1) + b"\0")
        with pytest.raises(IdxFormatError, match="bad magic 1234 at byte offset 0"):
            mnist_load_idx(img, lab)

    def test_truncated_payload(self, tmp_path):
        img = tmp_path / "img"
        img.write_bytes(struct.pack(">iiii", 2051, 2, 28, 28) + b"\0" * 100)
        lab = tmp_path / "lab"
        lab.write_bytes(struct.pack(">ii", 2049, 2) + b"\0\0")
        with pytest.raises(IdxFormatError, match="byte offset"):
            mnist_load_idx(img, lab)

    def test_truncated_header(self, tmp_path):
        img = tmp_path / "img"
        img.write_bytes(b"\0" * 7)
        with pytest.raises(IdxFormatError, match="truncated header"):
            mnist_load_idx(img, tmp_path / "missing")

    def test_count_mismatch(self, tmp_path):
        img = tmp_path / "img"
        img.write_bytes(struct.pack(">iiii", 2051, 1, 2, 2) + b"\0" * 4)
        lab = tmp_path / "lab"
        lab.write_bytes(struct.pack(">ii", 2049, 3) + b"\0" * 3)
        with pytest.raises(IdxFormatError, match="label count 3 != image count 1"):
            mnist_load_idx(img, lab)


class TestSetify:
    def test_digits_labels_and_provenance(self, tmp_path):
        paths = synthesize_idx(tmp_path, n_train=300, n_test=60, seed=1)
        mnist = mnist_load_idx(paths["train_images"], paths["train_labels"])
        scalar = gen_scalar_train(TargetKind("median"), 40, seed=4)
        sets = mnist_setify(scalar, mnist, seed=9, split="train")
        images, labels = mnist
        assert len(sets) == 40
        for s, src in zip(sets, scalar):
            assert np.array_equal(s.digits, src.elements)
            assert s.label == src.label
            assert s.split == "train"
            assert np.array_equal(labels[s.indices], s.digits)
            assert np.array_equal(s.images, images[s.indices])

    def test_setify_deterministic(self, tmp_path):
        paths = synthesize_idx(tmp_path, n_train=200, n_test=50, seed=2)
        mnist = mnist_load_idx(paths["train_images"], paths["train_labels"])
        scalar = gen_scalar_train(TargetKind("sum"), 20, seed=0)
        a = mnist_setify(scalar, mnist, seed=3, split="t")
        b = mnist_setify(scalar, mnist, seed=3, split="t")
        assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))

    def test_missing_digit_rejected(self, tmp_path):
        images = np.zeros((5, 784))
        labels = np.array([0, 1, 2, 3, 4])  # digits 5..9 absent
        scalar = gen_scalar_train(TargetKind("sum"), 5, seed=0)
        with pytest.raises(DomainError, match="no images of digit"):
            mnist_setify(scalar, (images, labels), seed=0, split="train")


class TestEnsure:
    def test_explicit_dir_must_exist(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ensure_mnist(tmp_path / "nowhere")

    def test_env_var_controls_default_dir(self, monkeypatch, tmp_path):
        monkeypatch.setenv("LAF_DATA_DIR", str(tmp_path / "d"))
        assert mnist_dir() == tmp_path / "d"
