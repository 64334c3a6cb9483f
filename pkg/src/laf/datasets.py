"""Synthetic set-regression tasks.

Scalar tasks draw multisets of digits 0..9 with cardinality uniform on
{2..M} and label each set with a classical aggregate of its elements.
Training labels are exact: integer power sums are computed in int64, so a
set's label is identical whether computed one set at a time or in a
vectorized batch. Test sets are label-stratified by rejection so the sweep
over cardinalities is not dominated by the mode of the label distribution.

Image tasks replace each digit with an MNIST image of that digit; the
regression target stays a function of the hidden digits. IDX files are
parsed from the standard big-endian binary layout.
"""

from __future__ import annotations

import gzip
import os
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import sample_moments
from .ndcore import DomainError

TARGET_NAMES = ("count", "sum", "max", "min", "mean", "median",
                "inverse_count", "moment", "skewness", "kurtosis")


@dataclass(frozen=True)
class TargetKind:
    """A regression target over a multiset; ``k`` is the moment order."""

    name: str
    k: int = 2

    def __post_init__(self):
        if self.name not in TARGET_NAMES:
            raise ValueError(f"unknown target '{self.name}'; valid: {TARGET_NAMES}")
        if self.name == "moment" and self.k < 1:
            raise ValueError(f"moment order must be >= 1, got {self.k}")

    def label(self) -> str:
        return f"moment{self.k}" if self.name == "moment" else self.name

    @classmethod
    def parse(cls, text: str) -> "TargetKind":
        if text.startswith("moment") and text != "moment":
            try:
                return cls("moment", int(text[len("moment"):]))
            except ValueError:
                raise ValueError(f"bad moment target '{text}'; use e.g. 'moment2'") from None
        if text == "moment":
            return cls("moment", 2)
        return cls(text)


def target_value(kind: TargetKind, elements) -> float:
    """Exact target for one multiset. Integer inputs use integer power sums."""
    x = np.asarray(elements)
    if x.ndim != 1 or x.size == 0:
        raise DomainError("need a non-empty 1-d multiset")
    n = x.size
    name = kind.name
    if name == "count":
        return float(n)
    if name == "inverse_count":
        return 1.0 / n
    if name == "max":
        return float(x.max())
    if name == "min":
        return float(x.min())
    if name == "median":
        s = np.sort(x).astype(np.float64)
        mid = n // 2
        return float(s[mid]) if n % 2 else float((s[mid - 1] + s[mid]) / 2.0)
    if name in ("skewness", "kurtosis"):
        moments = sample_moments(np.asarray(x, dtype=np.float64))
        return moments[3] if name == "skewness" else moments[4]

    # sum / mean / moment reduce a power sum; keep the accumulation loop
    # identical to the batched labeler (reduceat) so labels match exactly
    if np.issubdtype(x.dtype, np.integer):
        xs = np.sort(x).astype(np.int64)
        k = 1 if name in ("sum", "mean") else kind.k
        s = np.add.reduceat(xs ** k, np.array([0]))[0]
        total = float(s)
    else:
        xs = np.sort(x.astype(np.float64))
        k = 1 if name in ("sum", "mean") else kind.k
        total = float(np.add.reduceat(xs ** k, np.array([0]))[0])
    if name == "sum":
        return total
    return total / n  # mean and k-th moment


def targets_batch(kind: TargetKind, values, offsets) -> np.ndarray:
    """Vectorized labels for a flat batch; equal to ``target_value`` per set."""
    flat = np.asarray(values)
    offsets = np.asarray(offsets, dtype=np.int64)
    starts = offsets[:-1]
    lengths = np.diff(offsets)
    if np.any(lengths <= 0):
        raise DomainError(f"empty set at batch index {int(np.argmax(lengths <= 0))}")
    N = lengths.astype(np.float64)
    name = kind.name
    if name == "count":
        return N.copy()
    if name == "inverse_count":
        return 1.0 / N
    if name == "max":
        return np.maximum.reduceat(flat, starts).astype(np.float64)
    if name == "min":
        return np.minimum.reduceat(flat, starts).astype(np.float64)

    seg = np.repeat(np.arange(len(starts)), lengths)
    order = np.lexsort((flat, seg))
    svals = flat[order]
    if name == "median":
        s = svals.astype(np.float64)
        mid_hi = offsets[:-1] + lengths // 2
        hi = s[mid_hi]
        lo = s[np.maximum(mid_hi - 1, offsets[:-1])]
        return np.where(lengths % 2 == 1, hi, (lo + hi) / 2.0)
    if name in ("skewness", "kurtosis"):
        # delegate per set so labels inherit sample_moments bit for bit
        idx = 3 if name == "skewness" else 4
        out = np.empty(len(starts))
        fvals = np.asarray(flat, dtype=np.float64)
        for i in range(len(starts)):
            out[i] = sample_moments(fvals[offsets[i]:offsets[i + 1]])[idx]
        return out

    k = 1 if name in ("sum", "mean") else kind.k
    if np.issubdtype(flat.dtype, np.integer):
        sums = np.add.reduceat(svals.astype(np.int64) ** k, starts).astype(np.float64)
    else:
        sums = np.add.reduceat(svals.astype(np.float64) ** k, starts)
    if name == "sum":
        return sums
    return sums / N


# ---------------------------------------------------------------------------
# scalar tasks


@dataclass
class ScalarSetSample:
    """One multiset of digits 0..9 plus its exact target label."""

    elements: np.ndarray
    label: float


class ScalarTestSet(Sequence):
    """Sequence of samples plus how they were produced.

    ``stratified`` is False when the target was (near-)constant on the pilot
    draw and stratification fell back to plain sampling.
    """

    def __init__(self, samples: list[ScalarSetSample], stratified: bool):
        self.samples = samples
        self.stratified = stratified

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def _draw_sets(rng: np.random.Generator, kind: TargetKind, count: int, M: int):
    K = rng.integers(2, M + 1, size=count)
    flat = rng.integers(0, 10, size=int(K.sum()))
    offsets = np.concatenate([np.zeros(1, dtype=np.int64), np.cumsum(K)])
    labels = targets_batch(kind, flat, offsets)
    return flat, offsets, labels


def gen_scalar_train(kind: TargetKind, n: int, M: int = 10, seed: int = 0
                     ) -> list[ScalarSetSample]:
    """n multisets with cardinality uniform on {2..M}, digits uniform 0..9."""
    if M < 2:
        raise ValueError(f"need M >= 2, got {M}")
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    rng = np.random.default_rng([seed, 101])
    flat, offsets, labels = _draw_sets(rng, kind, n, M)
    return [ScalarSetSample(flat[offsets[i]:offsets[i + 1]].copy(), float(labels[i]))
            for i in range(n)]


def gen_scalar_test(kind: TargetKind, n: int, M: int, seed: int = 0
                    ) -> ScalarTestSet:
    """Label-stratified test set of cardinalities up to M.

    A pilot draw of 10n sets spans the label range with 20 equal-width bins;
    each of the n slots is assigned a uniformly chosen nonempty bin and
    filled by rejection (up to 1000 draw waves), falling back to the
    nearest-label draw seen for slots whose bin was never hit. Degenerate
    (constant-label) targets skip stratification; the returned set then has
    ``stratified == False``.
    """
    if M < 2:
        raise ValueError(f"need M >= 2, got {M}")
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    rng = np.random.default_rng([seed, 202, M])

    pilot_left = 10 * n
    chunks = []
    while pilot_left > 0:
        take = min(pilot_left, 200_000)
        chunks.append(_draw_sets(rng, kind, take, M)[2])
        pilot_left -= take
    pilot = np.concatenate(chunks)
    lo, hi = float(pilot.min()), float(pilot.max())

    if hi - lo < 1e-12:
        flat, offsets, labels = _draw_sets(rng, kind, n, M)
        samples = [ScalarSetSample(flat[offsets[i]:offsets[i + 1]].copy(),
                                   float(labels[i])) for i in range(n)]
        return ScalarTestSet(samples, stratified=False)

    edges = np.linspace(lo, hi, 21)
    counts, _ = np.histogram(pilot, bins=edges)
    nonempty = np.flatnonzero(counts > 0)
    assign = rng.choice(nonempty, size=n)
    lo_i, hi_i = edges[assign], edges[assign + 1]
    is_last = assign == len(edges) - 2

    best_dist = np.full(n, np.inf)
    best_elems: list[np.ndarray | None] = [None] * n
    best_label = np.empty(n)
    pending = np.arange(n)
    for _wave in range(1000):
        flat, offsets, labels = _draw_sets(rng, kind, len(pending), M)
        plo, phi = lo_i[pending], hi_i[pending]
        inside = (labels >= plo) & ((labels < phi) | (is_last[pending] & (labels <= phi)))
        dist = np.maximum(np.maximum(plo - labels, labels - phi), 0.0)
        improved = np.flatnonzero(dist < best_dist[pending])
        for j in improved:
            slot = pending[j]
            best_dist[slot] = dist[j]
            best_elems[slot] = flat[offsets[j]:offsets[j + 1]].copy()
            best_label[slot] = labels[j]
        pending = pending[~inside]
        if pending.size == 0:
            break

    samples = [ScalarSetSample(best_elems[i], float(best_label[i])) for i in range(n)]
    return ScalarTestSet(samples, stratified=True)


def save_scalar_samples(samples, path) -> None:
    """Newline-delimited records: K,x_1,...,x_K,label."""
    lines = []
    for s in samples:
        parts = [str(len(s.elements))] + [str(int(v)) for v in s.elements]
        parts.append(repr(float(s.label)))
        lines.append(",".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


def load_scalar_samples(path) -> list[ScalarSetSample]:
    samples = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                k = int(parts[0])
                if len(parts) != k + 2:
                    raise ValueError(f"expected {k + 2} fields, got {len(parts)}")
                elements = np.array([int(p) for p in parts[1:1 + k]], dtype=np.int64)
                label = float(parts[1 + k])
            except ValueError as exc:
                raise ValueError(f"{path}: bad record on line {ln}: {exc}") from None
            samples.append(ScalarSetSample(elements, label))
    return samples


# ---------------------------------------------------------------------------
# MNIST-backed tasks

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


class IdxFormatError(ValueError):
    """An IDX file does not match the declared binary layout."""


@dataclass
class MnistSetSample:
    """A multiset of digit images standing in for its digits."""

    images: np.ndarray   # [K, 784] float64 in [0, 1]
    digits: np.ndarray   # [K] int64, the hidden scalar elements
    label: float
    indices: np.ndarray  # [K] source rows in the split
    split: str


def _read_bytes(path) -> bytes:
    p = str(path)
    if p.endswith(".gz"):
        with gzip.open(p, "rb") as fh:
            return fh.read()
    return Path(p).read_bytes()


def mnist_load_idx(images_path, labels_path):
    """Parse an images/labels IDX pair -> (images [n, 784] in [0, 1], labels [n])."""
    buf = _read_bytes(images_path)
    if len(buf) < 16:
        raise IdxFormatError(f"{images_path}: truncated header at byte offset {len(buf)} (need 16)")
    magic, n, rows, cols = struct.unpack_from(">iiii", buf, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path}: bad magic {magic} at byte offset 0 "
                             f"(expected {IDX_IMAGES_MAGIC})")
    expected = 16 + n * rows * cols
    if len(buf) != expected:
        raise IdxFormatError(f"{images_path}: size {len(buf)} != expected {expected} "
                             f"(truncated at byte offset {min(len(buf), expected)})")
    images = np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(n, rows * cols)

    lbuf = _read_bytes(labels_path)
    if len(lbuf) < 8:
        raise IdxFormatError(f"{labels_path}: truncated header at byte offset {len(lbuf)} (need 8)")
    lmagic, ln = struct.unpack_from(">ii", lbuf, 0)
    if lmagic != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{labels_path}: bad magic {lmagic} at byte offset 0 "
                             f"(expected {IDX_LABELS_MAGIC})")
    if len(lbuf) != 8 + ln:
        raise IdxFormatError(f"{labels_path}: size {len(lbuf)} != expected {8 + ln} "
                             f"(truncated at byte offset {min(len(lbuf), 8 + ln)})")
    if ln != n:
        raise IdxFormatError(f"label count {ln} != image count {n}")
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=8).astype(np.int64)
    return images.astype(np.float64) / 255.0, labels


def mnist_setify(scalar_samples, mnist, seed: int, split: str
                 ) -> list[MnistSetSample]:
    """Replace each digit of each sample with an image of that digit.

    ``mnist`` is the (images, labels) pair of one split; images are drawn
    uniformly (with replacement) among that split's images of the digit.
    """
    images, labels = mnist
    rng = np.random.default_rng([seed, 303])
    by_digit = [np.flatnonzero(labels == d) for d in range(10)]
    for d in range(10):
        if by_digit[d].size == 0:
            raise DomainError(f"no images of digit {d} in split '{split}'")
    out = []
    for s in scalar_samples:
        digits = np.asarray(s.elements, dtype=np.int64)
        idx = np.array([by_digit[d][rng.integers(by_digit[d].size)] for d in digits],
                       dtype=np.int64)
        out.append(MnistSetSample(images[idx], digits, float(s.label), idx, split))
    return out


def synthesize_idx(dir_path, n_train: int = 60000, n_test: int = 10000,
                   seed: int = 0) -> dict[str, Path]:
    """Write a stand-in IDX quadruple with the official layout and sizes.

    Each digit gets a distinct blocky prototype pattern plus per-image
    noise — enough structure for a model to regress digit identity from
    pixels. Intended for environments where the real files are absent.
    """
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 404])
    protos = np.kron(rng.integers(30, 226, size=(10, 7, 7)),
                     np.ones((4, 4), dtype=np.int64)).reshape(10, 784)

    def make_split(count, images_name, labels_name):
        labels = rng.integers(0, 10, size=count)
        noise = rng.normal(0.0, 25.0, size=(count, 784))
        images = np.clip(protos[labels] + noise, 0, 255).astype(np.uint8)
        ipath, lpath = d / images_name, d / labels_name
        with open(ipath, "wb") as fh:
            fh.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, count, 28, 28))
            fh.write(images.tobytes())
        with open(lpath, "wb") as fh:
            fh.write(struct.pack(">ii", IDX_LABELS_MAGIC, count))
            fh.write(labels.astype(np.uint8).tobytes())
        return ipath, lpath

    ti, tl = make_split(n_train, TRAIN_IMAGES, TRAIN_LABELS)
    vi, vl = make_split(n_test, TEST_IMAGES, TEST_LABELS)
    return {"train_images": ti, "train_labels": tl,
            "test_images": vi, "test_labels": vl}


def _find_idx(d: Path, name: str) -> Path | None:
    for candidate in (d / name, d / (name + ".gz")):
        if candidate.exists():
            return candidate
    return None


def mnist_dir() -> Path:
    env = os.environ.get("LAF_DATA_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "laf" / "mnist"


_MNIST_CACHE: dict = {}


def ensure_mnist(data_dir=None):
    """Locate (or synthesize) the four IDX files; returns both parsed splits.

    Honors ``LAF_DATA_DIR``. Files are synthesized only into the default
    cache directory; a user-pointed directory missing files is an error.
    Parsed splits are cached per directory — sweeps call this once per M.
    """
    d = Path(data_dir) if data_dir is not None else mnist_dir()
    key = str(d)
    if key in _MNIST_CACHE:
        return _MNIST_CACHE[key]
    names = (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS)
    paths = [_find_idx(d, nm) for nm in names]
    if any(p is None for p in paths):
        if data_dir is None and not os.environ.get("LAF_DATA_DIR"):
            synthesize_idx(d)
            paths = [_find_idx(d, nm) for nm in names]
        else:
            missing = [nm for nm, p in zip(names, paths) if p is None]
            raise FileNotFoundError(f"missing IDX files in {d}: {', '.join(missing)}")
    train = mnist_load_idx(paths[0], paths[1])
    test = mnist_load_idx(paths[2], paths[3])
    _MNIST_CACHE[key] = (train, test)
    return train, test
