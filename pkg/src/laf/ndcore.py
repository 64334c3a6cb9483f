"""Dense float64 tensors with a reverse-mode tape, plus the handful of
layers, the optimizer and the scheduler the set-regression models need.

Ops record a backward closure on the currently active ``Tape`` (a context
manager); outside any tape they are plain numpy forward passes, so
evaluation is side-effect free. Gradients accumulate additively, so an
input consumed twice receives the sum of both contributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """An input value lies outside an operation's domain."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


def _as_f64(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


def ensure_finite(what: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what}: non-finite values in result")


class Tensor:
    """A dense float64 array plus a lazily allocated gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape})"


_ACTIVE_TAPE: "Tape | None" = None


def active_tape() -> "Tape | None":
    return _ACTIVE_TAPE


class Tape:
    """Ordered record of executed primitives for reverse-mode replay.

    Use as a context manager around a forward pass; ``backward`` then runs
    the recorded vector-Jacobian products in exact reverse execution order.
    """

    def __init__(self):
        self._records: list[tuple[str, Tensor, object]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; nesting is not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def __len__(self) -> int:
        return len(self._records)

    def record(self, name: str, out: Tensor, backward) -> None:
        self._records.append((name, out, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.accumulate(np.ones_like(loss.data))
        for _name, out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)


# ---------------------------------------------------------------------------
# primitive ops


def dense_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """x @ weights + bias for x [n, p], weights [p, q], bias [q]."""
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise ShapeError(
            f"dense_forward: need 2-d operands, got x {x.shape}, weights {weights.shape}"
        )
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"dense_forward: x columns ({x.shape[1]}) != weights rows ({weights.shape[0]})"
        )
    if bias.shape != (weights.shape[1],):
        raise ShapeError(
            f"dense_forward: bias shape {bias.shape} != (weights columns,) ({weights.shape[1]},)"
        )
    out = Tensor(x.data @ weights.data + bias.data)
    ensure_finite("dense_forward", out.data)
    tape = _ACTIVE_TAPE
    if tape is not None:
        xd, wd = x.data, weights.data

        def backward(g):
            x.accumulate(g @ wd.T)
            weights.accumulate(xd.T @ g)
            bias.accumulate(g.sum(axis=0))

        tape.record("dense_forward", out, backward)
    return out


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Row gather from table [v, d]; backward scatter-adds duplicate rows."""
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise ShapeError(f"embedding_lookup: indices must be 1-d, got shape {idx.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise DomainError("embedding_lookup: indices must be integers")
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = int(idx[(idx < 0) | (idx >= vocab)][0])
        raise IndexError(f"embedding_lookup: index {bad} out of range for vocab size {vocab}")
    out = Tensor(table.data[idx])
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward(g):
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, g)

        tape.record("embedding_lookup", out, backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; saturates to exactly 0/1 beyond |x|~36
    in float64, which downstream [0, 1] domains accept."""
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out_data[~pos] = ez / (1.0 + ez)
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward(g):
            x.accumulate(g * out_data * (1.0 - out_data))

        tape.record("sigmoid", out, backward)
    return out


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward(g):
            x.accumulate(g * (1.0 - out_data * out_data))

        tape.record("tanh", out, backward)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    tape = _ACTIVE_TAPE
    if tape is not None:
        orig = x.data.shape

        def backward(g):
            x.accumulate(g.reshape(orig))

        tape.record("reshape", out, backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data + b.data)
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward(g):
            a.accumulate(g)
            b.accumulate(g)

        tape.record("add", out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data * b.data)
    tape = _ACTIVE_TAPE
    if tape is not None:
        ad, bd = a.data, b.data

        def backward(g):
            a.accumulate(g * bd)
            b.accumulate(g * ad)

        tape.record("mul", out, backward)
    return out


def tsum(x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.data))
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward(g):
            x.accumulate(np.broadcast_to(g, x.data.shape))

        tape.record("tsum", out, backward)
    return out


def mae_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at zero residual is 0."""
    t = target.data if isinstance(target, Tensor) else _as_f64(target)
    if pred.shape != t.shape:
        raise ShapeError(f"mae_loss: pred shape {pred.shape} != target shape {t.shape}")
    if pred.size == 0:
        raise ShapeError("mae_loss: empty prediction batch")
    resid = pred.data - t
    out = Tensor(np.mean(np.abs(resid)))
    ensure_finite("mae_loss", out.data)
    tape = _ACTIVE_TAPE
    if tape is not None:
        n = pred.size

        def backward(g):
            pred.accumulate(g * np.sign(resid) / n)

        tape.record("mae_loss", out, backward)
    return out


# ---------------------------------------------------------------------------
# ragged batches of sets


class SetBatch:
    """A ragged batch of multisets of d-dimensional element vectors.

    All elements are stored flat in ``values`` [total, d];
    rows ``offsets[i]:offsets[i+1]`` hold set i.
    """

    __slots__ = ("values", "offsets")

    def __init__(self, values, offsets):
        self.values = _as_f64(values)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        self.offsets = np.asarray(offsets, dtype=np.int64)
        if self.offsets.ndim != 1 or self.offsets.size < 1:
            raise ShapeError("SetBatch: offsets must be a 1-d array of length n_sets + 1")
        if self.offsets[0] != 0 or self.offsets[-1] != self.values.shape[0]:
            raise ShapeError(
                f"SetBatch: offsets must start at 0 and end at {self.values.shape[0]}"
            )
        if np.any(np.diff(self.offsets) < 0):
            raise ShapeError("SetBatch: offsets must be non-decreasing")

    @classmethod
    def from_sets(cls, sets) -> "SetBatch":
        arrs = []
        for s in sets:
            a = _as_f64(s)
            if a.ndim == 1:
                a = a[:, None]
            arrs.append(a)
        lengths = np.array([a.shape[0] for a in arrs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(lengths)])
        if arrs:
            values = np.concatenate(arrs, axis=0)
        else:
            values = np.zeros((0, 1))
        return cls(values, offsets)

    @property
    def n_sets(self) -> int:
        return len(self.offsets) - 1

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def set_values(self, i: int) -> np.ndarray:
        return self.values[self.offsets[i]:self.offsets[i + 1]]


def sorted_segments(values: np.ndarray, offsets: np.ndarray):
    """Per-dimension, segment-wise ascending copy of ``values`` plus the
    permutation that produced each column.

    Pooling is element-wise across set members, so each dimension can be
    canonicalized independently; with a fixed summation order every
    reduction becomes bit-for-bit permutation invariant.
    """
    n, d = values.shape
    m = len(offsets) - 1
    seg = np.repeat(np.arange(m), np.diff(offsets))
    svals = np.empty_like(values)
    orders = np.empty((d, n), dtype=np.int64)
    for j in range(d):
        idx = np.lexsort((values[:, j], seg))
        orders[j] = idx
        svals[:, j] = values[idx, j]
    return svals, orders


def check_nonempty_segments(offsets: np.ndarray) -> None:
    lengths = np.diff(offsets)
    if np.any(lengths <= 0):
        i = int(np.argmax(lengths <= 0))
        raise DomainError(f"empty set at batch index {i}")


# ---------------------------------------------------------------------------
# parameters, optimizer, scheduler


@dataclass
class Block:
    values: Tensor
    adam_m: np.ndarray
    adam_v: np.ndarray

    @property
    def grad(self):
        return self.values.grad


class ParamStore:
    """Named trainable blocks with shared step count and Adam state."""

    def __init__(self):
        self.blocks: dict[str, Block] = {}
        self.step_count = 0

    def register(self, name: str, values) -> Tensor:
        if name in self.blocks:
            raise ValueError(f"block '{name}' already registered")
        t = values if isinstance(values, Tensor) else Tensor(values)
        self.blocks[name] = Block(t, np.zeros_like(t.data), np.zeros_like(t.data))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.blocks[name].values

    def __contains__(self, name: str) -> bool:
        return name in self.blocks

    def names(self) -> list[str]:
        return list(self.blocks)

    def n_params(self) -> int:
        return sum(b.values.size for b in self.blocks.values())

    def zero_grads(self) -> None:
        for b in self.blocks.values():
            b.values.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: b.values.data.copy() for k, b in self.blocks.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, b in self.blocks.items():
            b.values.data[...] = snap[k]


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every block; zeroes gradients."""
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, blk in store.blocks.items():
        g = blk.values.grad
        if g is None:
            raise ValueError(f"adam_step: no gradient for block '{name}'")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient in block '{name}'")
        blk.adam_m *= beta1
        blk.adam_m += (1.0 - beta1) * g
        blk.adam_v *= beta2
        blk.adam_v += (1.0 - beta2) * g * g
        update = (blk.adam_m / c1) / (np.sqrt(blk.adam_v / c2) + eps)
        blk.values.data -= lr * update
        blk.values.grad = None


@dataclass
class PlateauState:
    """Halve the learning rate when the monitored loss stops improving."""

    lr: float
    factor: float = 0.5
    patience: int = 5
    min_improvement: float = 1e-4
    lr_min: float = 1e-5
    best: float | None = None
    bad_epochs: int = 0


def plateau_decay(history, state: PlateauState) -> float:
    """Feed the latest entry of ``history`` to the scheduler; returns the lr
    to use next. Improvement means dropping below best by min_improvement."""
    if len(history) == 0:
        raise ValueError("plateau_decay: empty history")
    v = float(history[-1])
    if state.best is None or v < state.best - state.min_improvement:
        state.best = v
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= state.patience:
            state.lr = max(state.lr * state.factor, state.lr_min)
            state.bad_epochs = 0
    return state.lr


# ---------------------------------------------------------------------------
# verification


def grad_check(f, point, h: float = 1e-6) -> float:
    """Max relative error between tape gradients of scalar-valued ``f`` and
    central finite differences at ``point``.

    Relative error per coordinate is |analytic - fd| / max(1e-8, |analytic| + |fd|).
    """
    x = Tensor(np.array(point if not isinstance(point, Tensor) else point.data,
                        dtype=np.float64))
    with Tape() as tape:
        out = f(x)
        if out.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
        ensure_finite("grad_check: f(point)", out.data)
        tape.backward(out)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(Tensor(x.data)).data)
        flat[i] = orig - h
        lo = float(f(Tensor(x.data)).data)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"grad_check: non-finite evaluation at coordinate {i}")
        fd = (hi - lo) / (2.0 * h)
        a = analytic.ravel()[i]
        rel = abs(a - fd) / max(1e-8, abs(a) + abs(fd))
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# initializers


def dense_init(rng: np.random.Generator, n_in: int, n_out: int):
    """Weights uniform in [-1/sqrt(n_in), +1/sqrt(n_in)], zero bias."""
    bound = 1.0 / np.sqrt(n_in)
    w = rng.uniform(-bound, bound, size=(n_in, n_out))
    b = np.zeros(n_out)
    return w, b


def embedding_init(rng: np.random.Generator, vocab: int, dim: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(vocab, dim))
