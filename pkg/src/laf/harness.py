"""Model assembly, training loop, sweeps, restart studies, persistence.

Three architectures share one protocol (a ``ParamStore`` plus a
``forward(SetBatch) -> Tensor``):

* scalar sets: Embedding(10, 10) -> sigmoid -> pool(9 units) -> Dense(90, 1)
* image sets:  Dense(784, 300) tanh -> Dense(300, 100) tanh ->
               Dense(100, 30) sigmoid -> pool -> Dense(30u, 1000) tanh ->
               Dense(1000, 100) tanh -> Dense(100, 1)
* restart study: a bare pool on raw [0, 1] reals, plus a linear read-out
  when it has more than one unit.

Training is Adam on MAE with plateau decay of the learning rate driven by
validation loss; the best-validation weights are restored at the end.
Learnable pool exponents are projected back to [0, inf) after every step.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, fields as dc_fields, replace

import numpy as np

from . import baselines, datasets, units
from .ndcore import (
    NonFiniteError,
    ParamStore,
    PlateauState,
    SetBatch,
    Tape,
    Tensor,
    adam_step,
    dense_forward,
    dense_init,
    embedding_init,
    embedding_lookup,
    mae_loss,
    plateau_decay,
    reshape,
    sigmoid,
    tanh,
)

MODEL_KINDS = ("laf", "deepsets9", "pna7")
TASKS = ("scalar", "mnist")


class TrainingDiverged(RuntimeError):
    """The loss or a gradient went non-finite during training."""


class VersionError(ValueError):
    """A persisted record was written by an incompatible schema version."""


@dataclass
class ExperimentConfig:
    model: str = "laf"
    task: str = "scalar"
    target: str = "sum"
    units: int = 9
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    train_size: int = 10000
    val_size: int = 2000
    test_size: int = 10000
    sweep: tuple = (5, 10, 20, 30, 50)

    def __post_init__(self):
        self.sweep = tuple(int(m) for m in self.sweep)
        self.validate()

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}, got '{self.model}'")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got '{self.task}'")
        datasets.TargetKind.parse(self.target)  # raises on bad names
        if self.units < 1:
            raise ValueError(f"units must be >= 1, got {self.units}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.train_size < 1 or self.val_size < 1:
            raise ValueError("train_size and val_size must be >= 1")
        if self.test_size < 1:
            raise ValueError(f"test_size must be >= 1, got {self.test_size}")
        if any(m < 2 for m in self.sweep) or list(self.sweep) != sorted(self.sweep):
            raise ValueError(f"sweep must be ascending cardinalities >= 2, got {self.sweep}")

    def kind(self) -> datasets.TargetKind:
        return datasets.TargetKind.parse(self.target)

    def to_dict(self) -> dict:
        return {f.name: (list(self.sweep) if f.name == "sweep" else getattr(self, f.name))
                for f in dc_fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# models


class ScalarModel:
    """Digit-set regressor; the pool is learnable or fixed by ``kind``."""

    task = "scalar"

    def __init__(self, kind: str, rng: np.random.Generator, units_: int = 9):
        if kind not in MODEL_KINDS:
            raise ValueError(f"model kind must be one of {MODEL_KINDS}, got '{kind}'")
        self.kind = kind
        self.store = ParamStore()
        self.store.register("embed", embedding_init(rng, 10, 10))
        if kind == "laf":
            self.n_units = units_
            self.store.register("laf", units.init_param_array(rng, units_))
        else:
            self.n_units = baselines.pool_width(kind)
        w, b = dense_init(rng, self.n_units * 10, 1)
        self.store.register("head_w", w)
        self.store.register("head_b", b)

    def forward(self, batch: SetBatch) -> Tensor:
        digits = batch.values[:, 0].astype(np.int64)
        emb = embedding_lookup(self.store["embed"], digits)
        act = sigmoid(emb)
        if self.kind == "laf":
            pooled = units.laf_pool(act, batch.offsets, self.store["laf"])
        else:
            pooled = baselines.fixed_pool(act, batch.offsets, self.kind)
        out = dense_forward(pooled, self.store["head_w"], self.store["head_b"])
        return reshape(out, (batch.n_sets,))


class MnistModel:
    """Image-set regressor: per-image encoder, pool, three-layer read-out."""

    task = "mnist"

    def __init__(self, kind: str, rng: np.random.Generator, units_: int = 9):
        if kind not in MODEL_KINDS:
            raise ValueError(f"model kind must be one of {MODEL_KINDS}, got '{kind}'")
        self.kind = kind
        self.store = ParamStore()
        for name, (p, q) in (("enc1", (784, 300)), ("enc2", (300, 100)),
                             ("enc3", (100, 30))):
            w, b = dense_init(rng, p, q)
            self.store.register(name + "_w", w)
            self.store.register(name + "_b", b)
        if kind == "laf":
            self.n_units = units_
            self.store.register("laf", units.init_param_array(rng, units_))
        else:
            self.n_units = baselines.pool_width(kind)
        for name, (p, q) in (("dec1", (self.n_units * 30, 1000)),
                             ("dec2", (1000, 100)), ("dec3", (100, 1))):
            w, b = dense_init(rng, p, q)
            self.store.register(name + "_w", w)
            self.store.register(name + "_b", b)

    def forward(self, batch: SetBatch) -> Tensor:
        h = Tensor(batch.values)
        h = tanh(dense_forward(h, self.store["enc1_w"], self.store["enc1_b"]))
        h = tanh(dense_forward(h, self.store["enc2_w"], self.store["enc2_b"]))
        h = sigmoid(dense_forward(h, self.store["enc3_w"], self.store["enc3_b"]))
        if self.kind == "laf":
            pooled = units.laf_pool(h, batch.offsets, self.store["laf"])
        else:
            pooled = baselines.fixed_pool(h, batch.offsets, self.kind)
        h = tanh(dense_forward(pooled, self.store["dec1_w"], self.store["dec1_b"]))
        h = tanh(dense_forward(h, self.store["dec2_w"], self.store["dec2_b"]))
        out = dense_forward(h, self.store["dec3_w"], self.store["dec3_b"])
        return reshape(out, (batch.n_sets,))


class StudyModel:
    """A bare learnable pool on raw [0, 1] scalars; linear read-out iff
    more than one unit (a single unit's output is the prediction itself)."""

    task = "study"
    kind = "laf"

    def __init__(self, rng: np.random.Generator, units_: int):
        self.n_units = units_
        self.store = ParamStore()
        self.store.register("laf", units.init_param_array(rng, units_))
        if units_ > 1:
            w, b = dense_init(rng, units_, 1)
            self.store.register("head_w", w)
            self.store.register("head_b", b)

    def forward(self, batch: SetBatch) -> Tensor:
        x = Tensor(batch.values)
        pooled = units.laf_pool(x, batch.offsets, self.store["laf"])
        if self.n_units > 1:
            out = dense_forward(pooled, self.store["head_w"], self.store["head_b"])
            return reshape(out, (batch.n_sets,))
        return reshape(pooled, (batch.n_sets,))


def build_scalar_model(kind: str, rng: np.random.Generator, units_: int = 9) -> ScalarModel:
    return ScalarModel(kind, rng, units_)


def build_mnist_model(kind: str, rng: np.random.Generator, units_: int = 9) -> MnistModel:
    return MnistModel(kind, rng, units_)


def count_params(model) -> int:
    return model.store.n_params()


# ---------------------------------------------------------------------------
# flattened data, batching, inference


def flatten_samples(samples, task: str):
    """-> (values [n_total, d], offsets [n+1], labels [n])."""
    if task == "mnist":
        parts = [s.images for s in samples]
    else:
        parts = [np.asarray(s.elements, dtype=np.float64)[:, None] for s in samples]
    lengths = np.array([p.shape[0] for p in parts], dtype=np.int64)
    offsets = np.concatenate([np.zeros(1, dtype=np.int64), np.cumsum(lengths)])
    values = np.concatenate(parts, axis=0)
    labels = np.array([s.label for s in samples], dtype=np.float64)
    return values, offsets, labels


def _gather(values, offsets, idx):
    """Sub-batch of the given set indices, in the given order."""
    starts, ends = offsets[idx], offsets[idx + 1]
    lengths = ends - starts
    sub = np.concatenate([values[s:e] for s, e in zip(starts, ends)], axis=0)
    sub_offsets = np.concatenate([np.zeros(1, dtype=np.int64), np.cumsum(lengths)])
    return SetBatch(sub, sub_offsets)


def predict(model, values, offsets, chunk: int = 256) -> np.ndarray:
    """Inference in chunks of sets; records nothing, mutates nothing."""
    n = len(offsets) - 1
    out = np.empty(n)
    for s in range(0, n, chunk):
        idx = np.arange(s, min(s + chunk, n))
        out[idx] = model.forward(_gather(values, offsets, idx)).data
    return out


def mae_of(model, values, offsets, labels) -> float:
    return float(np.mean(np.abs(predict(model, values, offsets) - labels)))


# ---------------------------------------------------------------------------
# training


@dataclass
class RunRecord:
    config: ExperimentConfig
    train_losses: list[float]
    val_losses: list[float]
    test_mae: dict[int, float]
    wall_time: float
    laf_params: list | None
    data_hash: str
    version: int = 1


def _data_hash(config: ExperimentConfig) -> str:
    key = f"{config.task}|{config.target}|{config.seed}|{config.train_size}|{config.val_size}"
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def _fit(model, train_flat, val_flat, config: ExperimentConfig):
    """Core loop shared by ``train`` and the restart study.

    Returns (train_losses, val_losses); the model holds its best-validation
    weights on exit.
    """
    values, offsets, labels = train_flat
    vvalues, voffsets, vlabels = val_flat
    n = len(labels)
    shuffle_rng = np.random.default_rng([config.seed, 505])
    state = PlateauState(lr=config.lr)
    train_losses: list[float] = []
    val_losses: list[float] = []
    best_val = np.inf
    best_snap = model.store.snapshot()

    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        batch_losses = []
        for s in range(0, n, config.batch_size):
            idx = perm[s:s + config.batch_size]
            batch = _gather(values, offsets, idx)
            try:
                with Tape() as tape:
                    pred = model.forward(batch)
                    loss = mae_loss(pred, labels[idx])
                    tape.backward(loss)
                adam_step(model.store, lr=state.lr, beta1=config.beta1,
                          beta2=config.beta2, eps=config.adam_eps)
            except NonFiniteError as exc:
                laf_dump = (np.array2string(model.store["laf"].data)
                            if "laf" in model.store else "n/a")
                raise TrainingDiverged(
                    f"non-finite value at epoch {epoch}, batch starting at {s} "
                    f"(set indices {idx[:8].tolist()}...); pool params:\n{laf_dump}"
                ) from exc
            if "laf" in model.store:
                units.project_param_array(model.store["laf"].data)
            batch_losses.append(float(loss.data))
        train_losses.append(float(np.mean(batch_losses)))
        val_mae = float(np.mean(np.abs(predict(model, vvalues, voffsets) - vlabels)))
        val_losses.append(val_mae)
        if val_mae < best_val:
            best_val = val_mae
            best_snap = model.store.snapshot()
        plateau_decay(val_losses, state)

    model.store.restore(best_snap)
    return train_losses, val_losses


def train(model, train_data, val_data, config: ExperimentConfig) -> RunRecord:
    """Fit ``model`` on sample lists; returns the run's record (no test yet).

    A zero-epoch config returns the initial weights untouched, with empty
    loss curves.
    """
    t0 = time.perf_counter()
    train_flat = flatten_samples(train_data, model.task)
    val_flat = flatten_samples(val_data, model.task)
    train_losses, val_losses = _fit(model, train_flat, val_flat, config)
    laf_params = (model.store["laf"].data.tolist() if "laf" in model.store else None)
    return RunRecord(config=config, train_losses=train_losses,
                     val_losses=val_losses, test_mae={},
                     wall_time=time.perf_counter() - t0,
                     laf_params=laf_params, data_hash=_data_hash(config))


def model_grad_check(model, batch: SetBatch, labels, h: float = 1e-6) -> float:
    """Max relative error, analytic vs central differences, across every
    parameter of every block, for the batch MAE."""
    labels = np.asarray(labels, dtype=np.float64)
    model.store.zero_grads()
    with Tape() as tape:
        loss = mae_loss(model.forward(batch), labels)
        tape.backward(loss)
    analytic = {k: (b.values.grad.copy() if b.values.grad is not None
                    else np.zeros_like(b.values.data))
                for k, b in model.store.blocks.items()}
    model.store.zero_grads()

    # a central difference carries ~eps*|loss|/h of roundoff no matter how
    # small the true gradient is; differences inside that noise floor say
    # nothing about the analytic value, so they are not scored
    eps = np.finfo(np.float64).eps
    noise = 100.0 * eps * abs(float(loss.data)) / h

    worst = 0.0
    for name, blk in model.store.blocks.items():
        flat = blk.values.data.ravel()
        aflat = analytic[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(mae_loss(model.forward(batch), labels).data)
            flat[i] = orig - h
            lo = float(mae_loss(model.forward(batch), labels).data)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * h)
            diff = abs(aflat[i] - fd)
            if diff <= noise:
                continue
            rel = diff / max(1e-8, abs(aflat[i]) + abs(fd))
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# evaluation sweeps

_TEST_CACHE: dict = {}


def _scalar_test_flat(target: datasets.TargetKind, M: int, n: int, seed: int):
    key = (target.label(), M, n, seed)
    if key not in _TEST_CACHE:
        ts = datasets.gen_scalar_test(target, n, M, seed)
        _TEST_CACHE[key] = flatten_samples(list(ts), "scalar")
    return _TEST_CACHE[key]


def evaluate_sweep(model, target: datasets.TargetKind, sweep, per_M_n: int,
                   seed: int) -> dict[int, float]:
    """Test MAE per cardinality M; stratified fresh test sets, cached per
    (target, M, n, seed). Pure: the model is not touched."""
    out: dict[int, float] = {}
    for M in sweep:
        if model.task == "mnist":
            ts = datasets.gen_scalar_test(target, per_M_n, int(M), seed)
            _, test_split = datasets.ensure_mnist()
            msamples = datasets.mnist_setify(list(ts), test_split, seed, "test")
            values, offsets, labels = flatten_samples(msamples, "mnist")
        else:
            values, offsets, labels = _scalar_test_flat(target, int(M), per_M_n, seed)
        out[int(M)] = float(np.mean(np.abs(predict(model, values, offsets) - labels)))
    return out


# ---------------------------------------------------------------------------
# restart study (distribution of solutions over random inits)


@dataclass
class StudyRow:
    units: int
    restart: int
    mae: float
    params: np.ndarray            # [units, 12]
    head_w: np.ndarray | None     # [units] read-out weights (units > 1)
    head_b: float | None


def gen_real_sets(n: int, seed, target: datasets.TargetKind, max_card: int = 10):
    """Sets of reals uniform on [0, 1], cardinality uniform on {2..max_card}."""
    rng = np.random.default_rng(seed)
    K = rng.integers(2, max_card + 1, size=n)
    flat = rng.uniform(0.0, 1.0, size=int(K.sum()))
    offsets = np.concatenate([np.zeros(1, dtype=np.int64), np.cumsum(K)])
    labels = datasets.targets_batch(target, flat, offsets)
    return flat[:, None], offsets, labels


def study_one(target_label: str, units_: int, restart: int,
              config_dict: dict) -> StudyRow:
    """One restart: fresh init, shared data streams, test MAE. Top-level and
    picklable so studies can fan out across processes."""
    config = ExperimentConfig.from_dict(config_dict)
    target = datasets.TargetKind.parse(target_label)
    train_flat = gen_real_sets(config.train_size, [config.seed, 606], target)
    val_flat = gen_real_sets(config.val_size, [config.seed, 607], target)
    test_flat = gen_real_sets(config.test_size, [config.seed, 608], target)

    rng = np.random.default_rng([config.seed, 700, units_, restart])
    model = StudyModel(rng, units_)
    cfg = replace(config, seed=int(np.random.default_rng(
        [config.seed, 701, units_, restart]).integers(2 ** 31)))
    _fit(model, train_flat, val_flat, cfg)
    mae = mae_of(model, *test_flat)
    head_w = head_b = None
    if units_ > 1:
        head_w = model.store["head_w"].data[:, 0].copy()
        head_b = float(model.store["head_b"].data[0])
    return StudyRow(units_, restart, mae, model.store["laf"].data.copy(),
                    head_w, head_b)


def restarts_study(target: datasets.TargetKind, unit_counts, n_restarts: int,
                   config: ExperimentConfig) -> list[StudyRow]:
    """Train n_restarts random inits per unit count on one shared dataset."""
    rows = []
    for u in unit_counts:
        for r in range(n_restarts):
            rows.append(study_one(target.label(), int(u), r, config.to_dict()))
    return rows


# ---------------------------------------------------------------------------
# persistence


def _atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def results_csv_text(record: RunRecord) -> str:
    lines = ["target,model,M,mae,seed"]
    for M in sorted(record.test_mae):
        lines.append(f"{record.config.target},{record.config.model},{M},"
                     f"{repr(record.test_mae[M])},{record.config.seed}")
    return "\n".join(lines) + "\n"


def persist(record: RunRecord, run_dir) -> None:
    """Write run.json and results.csv (atomic, deterministic bytes)."""
    os.makedirs(run_dir, exist_ok=True)
    doc = {
        "version": record.version,
        "config": record.config.to_dict(),
        "losses": {"train": record.train_losses, "val": record.val_losses},
        "test_mae": {str(m): v for m, v in sorted(record.test_mae.items())},
        "laf_params": record.laf_params,
        "wall_time": record.wall_time,
        "data_hash": record.data_hash,
    }
    _atomic_write(os.path.join(run_dir, "run.json"),
                  json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _atomic_write(os.path.join(run_dir, "results.csv"), results_csv_text(record))


def load(run_dir) -> RunRecord:
    path = os.path.join(run_dir, "run.json")
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("version")
    if version != 1:
        raise VersionError(f"{path}: written by schema version {version}; "
                           f"this build reads version 1")
    return RunRecord(
        config=ExperimentConfig.from_dict(doc["config"]),
        train_losses=[float(v) for v in doc["losses"]["train"]],
        val_losses=[float(v) for v in doc["losses"]["val"]],
        test_mae={int(k): float(v) for k, v in doc["test_mae"].items()},
        wall_time=float(doc["wall_time"]),
        laf_params=doc["laf_params"],
        data_hash=doc["data_hash"],
        version=1,
    )


def save_weights(store: ParamStore, path) -> None:
    np.savez(path, **{k: b.values.data for k, b in store.blocks.items()})


def load_weights(store: ParamStore, path) -> None:
    with np.load(path) as npz:
        names = set(npz.files)
        expected = set(store.names())
        if names != expected:
            raise VersionError(f"{path}: weight blocks {sorted(names)} != "
                               f"model blocks {sorted(expected)}")
        for k in expected:
            arr = npz[k]
            if arr.shape != store[k].data.shape:
                raise VersionError(f"{path}: block '{k}' shape {arr.shape} != "
                                   f"{store[k].data.shape}")
            store[k].data[...] = arr
