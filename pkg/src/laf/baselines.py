"""Fixed (non-learnable) pooling baselines.

Two stacks of classical aggregators applied element-wise over sets:

* ``deepsets9``: three copies each of max, sum, mean — a parameter-count
  match for a nine-unit learnable pool.
* ``pna7``: mean, max, sum, std, var, skewness, kurtosis.

Moments are population moments (divisor N). A constant set has std 0; its
skewness and kurtosis are defined as 0 there, with zero gradient. The max
gradient routes to the lowest original index among tied maxima. Summation
order is canonicalized exactly as in the learnable pool, so outputs are
bitwise permutation invariant.
"""

from __future__ import annotations

import numpy as np

from .ndcore import (
    DomainError,
    SetBatch,
    Tensor,
    active_tape,
    check_nonempty_segments,
    ensure_finite,
    sorted_segments,
)

POOL_UNITS = {
    "deepsets9": ("max", "max", "max", "sum", "sum", "sum", "mean", "mean", "mean"),
    "pna7": ("mean", "max", "sum", "std", "var", "skewness", "kurtosis"),
}


def pool_width(kind: str) -> int:
    return len(POOL_UNITS[kind])


def sample_moments(xs):
    """(mean, std, var, skewness, kurtosis) of a multiset, population form.

    A zero-variance set gets skewness = kurtosis = 0 by convention. Constant
    sets are detected exactly (min == max) so the convention actually fires;
    summing first would leave a rounding-sized fake variance behind.
    """
    x = np.sort(np.asarray(xs, dtype=np.float64))
    if x.ndim != 1 or x.size == 0:
        raise DomainError("need a non-empty 1-d set of values")
    n = x.size
    if x[0] == x[-1]:
        return float(x[0]), 0.0, 0.0, 0.0, 0.0
    mean = np.add.reduce(x) / n
    z = x - mean
    var = np.add.reduce(z * z) / n
    std = float(np.sqrt(var))
    if std == 0.0:
        skew = kurt = 0.0
    else:
        w = z / std
        skew = float(np.add.reduce(w ** 3) / n)
        kurt = float(np.add.reduce(w ** 4) / n)
    return float(mean), std, float(var), skew, kurt


def _fixed_forward(values: np.ndarray, offsets: np.ndarray, kind: str):
    if kind not in POOL_UNITS:
        raise ValueError(f"unknown pool kind '{kind}'; valid: {tuple(POOL_UNITS)}")
    check_nonempty_segments(offsets)
    units = POOL_UNITS[kind]
    svals, orders = sorted_segments(values, offsets)
    starts = offsets[:-1]
    lengths = np.diff(offsets)
    n, d = values.shape
    m = len(starts)
    N = lengths.astype(np.float64)[:, None]

    ssum = np.add.reduceat(svals, starts, axis=0)
    # pin exactly-constant segments to their common value so the degenerate
    # conventions (std = var = skew = kurt = 0) fire despite float rounding
    seg_min = np.minimum.reduceat(svals, starts, axis=0)
    seg_max = np.maximum.reduceat(svals, starts, axis=0)
    mean = np.where(seg_min == seg_max, seg_min, ssum / N)
    mean_rep = np.repeat(mean, lengths, axis=0)
    z = svals - mean_rep
    m2 = np.add.reduceat(z * z, starts, axis=0) / N
    std = np.sqrt(m2)
    m3 = np.add.reduceat(z ** 3, starts, axis=0) / N
    m4 = np.add.reduceat(z ** 4, starts, axis=0) / N
    ok = std > 0.0
    sd = np.where(ok, std, 1.0)  # placeholder 1 where degenerate, masked below
    skew = np.where(ok, m3 / sd ** 3, 0.0)
    kurt = np.where(ok, m4 / sd ** 4, 0.0)

    # max over the original layout (exact, order-free); remember the first
    # original index of the maximum per set and dimension for the backward
    mx = np.maximum.reduceat(values, starts, axis=0)
    is_max = values == np.repeat(mx, lengths, axis=0)
    cand = np.where(is_max, np.arange(n, dtype=np.int64)[:, None], n)
    argmax_first = np.minimum.reduceat(cand, starts, axis=0)

    by_name = {"mean": mean, "sum": ssum, "max": mx, "std": std, "var": m2,
               "skewness": skew, "kurtosis": kurt}
    out = np.stack([by_name[u] for u in units], axis=1)  # [m, u, d]
    cache = (orders, offsets, lengths, N, z, std, ok, m3, m4, argmax_first, units, d)
    return out, cache


def _fixed_backward(cache, upstream: np.ndarray):
    (orders, offsets, lengths, N, z, std, ok, m3, m4, argmax_first, units, d) = cache
    n = z.shape[0]
    rep = lambda A: np.repeat(A, lengths, axis=0)
    sd = np.where(ok, std, 1.0)

    g_sorted = np.zeros((n, d))
    g_direct = np.zeros((n, d))  # contributions indexed in original order (max)
    for ui, unit in enumerate(units):
        gu = upstream[:, ui, :]  # [m, d]
        if unit == "mean":
            g_sorted += rep(gu / N)
        elif unit == "sum":
            g_sorted += rep(gu)
        elif unit == "max":
            for j in range(d):
                np.add.at(g_direct[:, j], argmax_first[:, j], gu[:, j])
        elif unit == "std":
            g_sorted += rep(np.where(ok, gu / (N * sd), 0.0)) * z
        elif unit == "var":
            g_sorted += rep(gu * 2.0 / N) * z
        elif unit == "skewness":
            factor = np.where(ok, 3.0 * gu / (N * sd ** 3), 0.0)
            term = z * z - rep(sd ** 2) - rep(np.where(ok, m3 / sd ** 2, 0.0)) * z
            g_sorted += rep(factor) * term
        elif unit == "kurtosis":
            factor = np.where(ok, 4.0 * gu / (N * sd ** 4), 0.0)
            term = z ** 3 - rep(m3) - rep(np.where(ok, m4 / sd ** 2, 0.0)) * z
            g_sorted += rep(factor) * term

    grad_values = np.empty_like(g_sorted)
    for j in range(d):
        grad_values[orders[j], j] = g_sorted[:, j]
    grad_values += g_direct
    return grad_values


def fixed_pool(x: Tensor, offsets, kind: str) -> Tensor:
    """Differentiable fixed pooling over a ragged batch: [n, d] -> [m, u*d]."""
    offsets = np.asarray(offsets, dtype=np.int64)
    out3, cache = _fixed_forward(x.data, offsets, kind)
    m, u, d = out3.shape
    out = Tensor(out3.reshape(m, u * d))
    ensure_finite("fixed_pool", out.data)
    tape = active_tape()
    if tape is not None:

        def backward(g):
            x.accumulate(_fixed_backward(cache, g.reshape(m, u, d)))

        tape.record("fixed_pool", out, backward)
    return out


def fixed_pool_forward(batch: SetBatch, kind: str) -> np.ndarray:
    """Plain-numpy pooling; no gradients recorded."""
    out3, _ = _fixed_forward(batch.values, batch.offsets, kind)
    m, u, d = out3.shape
    return out3.reshape(m, u * d)
