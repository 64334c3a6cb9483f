"""Learnable aggregation units.

A unit maps a multiset x of values in [0, 1] to

    (alpha * L_{a,b}(x) + beta * L_{c,d}(1 - x))
    -------------------------------------------- ,
    (gamma * L_{e,f}(x) + delta * L_{g,h}(1 - x))

where L_{a,b}(x) = (sum_i x_i^b)^a with a, b >= 0. Specific settings of the
twelve parameters recover the classical aggregators (sum, mean, max in the
limit, moments, ...); see ``preset_params``. Gradients are analytic, with
the convention that a power's derivative contributes 0 wherever the power
rule itself breaks down (base 0), and 0^0 = 1 throughout.

The multi-unit layer applies r independent units element-wise to every
dimension of a batch of sets of vectors; summation order inside each set is
canonicalized by sorting, so pooled outputs are bitwise permutation
invariant.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .ndcore import (
    DomainError,
    SetBatch,
    Tensor,
    active_tape,
    check_nonempty_segments,
    ensure_finite,
    sigmoid,
    sorted_segments,
)

PARAM_FIELDS = ("a", "b", "c", "d", "e", "f", "g", "h",
                "alpha", "beta", "gamma", "delta")
N_PARAMS = 12

# |denominator| below this is clamped (sign-preserving, sign(0) := +1)
DENOM_EPS = 1e-8


@dataclass
class LafParams:
    """Parameters of one aggregation unit.

    Exponents a..h must be nonnegative; coefficients alpha..delta are free.
    """

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float
    g: float
    h: float
    alpha: float
    beta: float
    gamma: float
    delta: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in PARAM_FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "LafParams":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (N_PARAMS,):
            raise ValueError(f"LafParams.from_array: need shape ({N_PARAMS},), got {arr.shape}")
        return cls(*(float(v) for v in arr))


@dataclass
class LafLayer:
    """r independent units applied element-wise to d-dimensional sets."""

    units: list[LafParams]
    input_dim: int

    def __post_init__(self):
        if len(self.units) < 1:
            raise ValueError("LafLayer: need at least one unit")
        if self.input_dim < 1:
            raise ValueError("LafLayer: input_dim must be >= 1")

    def param_array(self) -> np.ndarray:
        return np.stack([u.as_array() for u in self.units])


# ---------------------------------------------------------------------------
# masked power helpers
#
# Exponents may legitimately sit at 0 or in (0, 1) while elements touch the
# domain boundary, so 0^0, 0 * log 0 and 0^(negative) all show up in honest
# intermediate states. numpy already gives 0.0**0.0 == 1.0; the helpers
# below zero out the gradient terms that have no finite value instead of
# letting NaN/inf poison the whole batch.


def _dpow(base, expo):
    """d(base**expo)/d(base) = expo * base**(expo-1), 0 where not finite."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = expo * base ** (expo - 1.0)
    return np.where(np.isfinite(out), out, 0.0)


def _mul_log(powed, base):
    """powed * log(base) with a zero contribution at base == 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = powed * np.log(base)
    return np.where(np.isfinite(out), out, 0.0)


def _stabilize(den):
    """Sign-preserving clamp of the denominator away from 0."""
    s = np.where(den >= 0.0, 1.0, -1.0)
    return np.where(np.abs(den) >= DENOM_EPS, den, DENOM_EPS * s)


# ---------------------------------------------------------------------------
# scalar-set forward/backward


def _validated_set(xs) -> np.ndarray:
    x = np.asarray(xs, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DomainError("need a non-empty 1-d set of values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise DomainError(f"set elements must lie in [0, 1], got range "
                          f"[{x.min()}, {x.max()}]")
    return x


def l_ab(xs, a: float, b: float) -> float:
    """(sum_i x_i^b)^a over a multiset with entries in [0, 1]."""
    if a < 0 or b < 0:
        raise DomainError(f"exponents must be nonnegative, got a={a}, b={b}")
    x = np.sort(_validated_set(xs))
    s = np.add.reduce(x ** b)
    return float(s ** a)


def laf_forward(xs, p: LafParams) -> float:
    """Value of one unit on a scalar multiset. Elements must be in [0, 1]."""
    x = np.sort(_validated_set(xs))
    P = p.as_array()
    if np.any(P[:8] < 0):
        raise DomainError("exponents a..h must be nonnegative")
    y = 1.0 - x
    s1 = np.add.reduce(x ** P[1])
    s2 = np.add.reduce(y ** P[3])
    s3 = np.add.reduce(x ** P[5])
    s4 = np.add.reduce(y ** P[7])
    num = P[8] * s1 ** P[0] + P[9] * s2 ** P[2]
    den = float(_stabilize(P[10] * s3 ** P[4] + P[11] * s4 ** P[6]))
    out = num / den
    ensure_finite("laf_forward", np.asarray(out))
    return float(out)


def laf_backward(xs, p: LafParams, upstream: float = 1.0):
    """Analytic gradients of one unit's output.

    Returns ``(grad_xs, grad_params)`` with ``grad_xs`` aligned to the input
    order and ``grad_params`` following PARAM_FIELDS. Backward through the
    clamped region of the denominator is 0.
    """
    x = _validated_set(xs)
    P = p.as_array()
    if np.any(P[:8] < 0):
        raise DomainError("exponents a..h must be nonnegative")
    xs_sorted = np.sort(x)
    ys_sorted = 1.0 - xs_sorted
    y = 1.0 - x
    a, b, c, d, e, f, g, h = P[:8]
    alpha, beta, gamma, delta = P[8:]

    s1 = np.add.reduce(xs_sorted ** b)
    s2 = np.add.reduce(ys_sorted ** d)
    s3 = np.add.reduce(xs_sorted ** f)
    s4 = np.add.reduce(ys_sorted ** h)
    l1, l2, l3, l4 = s1 ** a, s2 ** c, s3 ** e, s4 ** g
    num = alpha * l1 + beta * l2
    den_raw = gamma * l3 + delta * l4
    den = float(_stabilize(den_raw))

    u_num = upstream / den
    u_den = -upstream * num / (den * den) if abs(den_raw) >= DENOM_EPS else 0.0

    # chain through the four power sums; per-element factors use the
    # original positions, the sums themselves are order-free
    t1 = u_num * alpha * _dpow(s1, a)
    t2 = u_num * beta * _dpow(s2, c)
    t3 = u_den * gamma * _dpow(s3, e)
    t4 = u_den * delta * _dpow(s4, g)
    grad_x = (t1 * _dpow(x, b) - t2 * _dpow(y, d)
              + t3 * _dpow(x, f) - t4 * _dpow(y, h))

    grad_p = np.empty(N_PARAMS)
    grad_p[0] = u_num * alpha * _mul_log(l1, s1)
    grad_p[1] = t1 * np.add.reduce(_mul_log(x ** b, x))
    grad_p[2] = u_num * beta * _mul_log(l2, s2)
    grad_p[3] = t2 * np.add.reduce(_mul_log(y ** d, y))
    grad_p[4] = u_den * gamma * _mul_log(l3, s3)
    grad_p[5] = t3 * np.add.reduce(_mul_log(x ** f, x))
    grad_p[6] = u_den * delta * _mul_log(l4, s4)
    grad_p[7] = t4 * np.add.reduce(_mul_log(y ** h, y))
    grad_p[8] = u_num * l1
    grad_p[9] = u_num * l2
    grad_p[10] = u_den * l3
    grad_p[11] = u_den * l4

    ensure_finite("laf_backward", grad_x)
    ensure_finite("laf_backward", grad_p)
    return grad_x, grad_p


# ---------------------------------------------------------------------------
# pooled layer over ragged batches


def _pool_forward(values: np.ndarray, offsets: np.ndarray, P: np.ndarray):
    """Apply r units element-wise over a flat batch.

    values [n, d] in [0, 1]; offsets [m+1]; P [r, 12].
    Returns (out [m, r, d], cache).
    """
    check_nonempty_segments(offsets)
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise DomainError("set elements must lie in [0, 1]")
    if np.any(P[:, :8] < 0):
        raise DomainError("exponents a..h must be nonnegative")
    svals, orders = sorted_segments(values, offsets)
    comp = 1.0 - svals
    starts = offsets[:-1]

    ex = P[:, :8].T[:, None, :, None]       # each [1, r, 1] when indexed
    a, b, c, d, e, f, g, h = ex
    co = P[:, 8:].T[:, None, :, None]
    alpha, beta, gamma, delta = co

    X = svals[:, None, :]                   # [n, 1, d] -> broadcast to [n, r, d]
    Y = comp[:, None, :]
    xb = X ** b
    yd = Y ** d
    xf = X ** f
    yh = Y ** h
    s1 = np.add.reduceat(xb, starts, axis=0)
    s2 = np.add.reduceat(yd, starts, axis=0)
    s3 = np.add.reduceat(xf, starts, axis=0)
    s4 = np.add.reduceat(yh, starts, axis=0)
    l1, l2, l3, l4 = s1 ** a, s2 ** c, s3 ** e, s4 ** g
    num = alpha * l1 + beta * l2
    den_raw = gamma * l3 + delta * l4
    den = _stabilize(den_raw)
    out = num / den
    cache = (svals, comp, orders, offsets, xb, yd, xf, yh,
             s1, s2, s3, s4, l1, l2, l3, l4, num, den_raw, den, P)
    return out, cache


def _pool_backward(cache, upstream: np.ndarray):
    """Vector-Jacobian products for ``_pool_forward``.

    upstream [m, r, d] -> (grad_values [n, d], grad_P [r, 12]).
    """
    (svals, comp, orders, offsets, xb, yd, xf, yh,
     s1, s2, s3, s4, l1, l2, l3, l4, num, den_raw, den, P) = cache
    starts = offsets[:-1]
    lengths = np.diff(offsets)
    r = P.shape[0]

    ex = P[:, :8].T[:, None, :, None]
    a, b, c, d, e, f, g, h = ex
    co = P[:, 8:].T[:, None, :, None]
    alpha, beta, gamma, delta = co

    u_num = upstream / den
    active = np.abs(den_raw) >= DENOM_EPS
    u_den = np.where(active, -upstream * num / (den * den), 0.0)

    # per-set factors for each of the four power-sum paths
    t1 = u_num * alpha * _dpow(s1, a)
    t2 = u_num * beta * _dpow(s2, c)
    t3 = u_den * gamma * _dpow(s3, e)
    t4 = u_den * delta * _dpow(s4, g)

    grad_P = np.empty((r, N_PARAMS))
    grad_P[:, 0] = (u_num * alpha * _mul_log(l1, s1)).sum(axis=(0, 2))
    grad_P[:, 1] = (t1 * np.add.reduceat(_mul_log(xb, svals[:, None, :]), starts, axis=0)).sum(axis=(0, 2))
    grad_P[:, 2] = (u_num * beta * _mul_log(l2, s2)).sum(axis=(0, 2))
    grad_P[:, 3] = (t2 * np.add.reduceat(_mul_log(yd, comp[:, None, :]), starts, axis=0)).sum(axis=(0, 2))
    grad_P[:, 4] = (u_den * gamma * _mul_log(l3, s3)).sum(axis=(0, 2))
    grad_P[:, 5] = (t3 * np.add.reduceat(_mul_log(xf, svals[:, None, :]), starts, axis=0)).sum(axis=(0, 2))
    grad_P[:, 6] = (u_den * delta * _mul_log(l4, s4)).sum(axis=(0, 2))
    grad_P[:, 7] = (t4 * np.add.reduceat(_mul_log(yh, comp[:, None, :]), starts, axis=0)).sum(axis=(0, 2))
    grad_P[:, 8] = (u_num * l1).sum(axis=(0, 2))
    grad_P[:, 9] = (u_num * l2).sum(axis=(0, 2))
    grad_P[:, 10] = (u_den * l3).sum(axis=(0, 2))
    grad_P[:, 11] = (u_den * l4).sum(axis=(0, 2))

    X = svals[:, None, :]
    Y = comp[:, None, :]
    rep = lambda A: np.repeat(A, lengths, axis=0)
    g_sorted = (rep(t1) * _dpow(X, b) - rep(t2) * _dpow(Y, d)
                + rep(t3) * _dpow(X, f) - rep(t4) * _dpow(Y, h)).sum(axis=1)

    grad_values = np.empty_like(g_sorted)
    for j in range(g_sorted.shape[1]):
        grad_values[orders[j], j] = g_sorted[:, j]
    return grad_values, grad_P


def laf_pool(x: Tensor, offsets, params: Tensor) -> Tensor:
    """Differentiable pooling: r units element-wise over a ragged batch.

    x [n, d] (values in [0, 1]), params [r, 12] -> [m, r*d], unit-major.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    out3, cache = _pool_forward(x.data, offsets, params.data)
    m, r, d = out3.shape
    out = Tensor(out3.reshape(m, r * d))
    ensure_finite("laf_pool", out.data)
    tape = active_tape()
    if tape is not None:

        def backward(g):
            gv, gP = _pool_backward(cache, g.reshape(m, r, d))
            x.accumulate(gv)
            params.accumulate(gP)

        tape.record("laf_pool", out, backward)
    return out


def pool_denominators(values, offsets, P) -> np.ndarray:
    """Raw (pre-stabilization) denominator of every unit, [m, r, d].

    Conditioning diagnostic: finite-difference probes of the ratio lose
    their meaning near the den -> 0 pole (central differences pick up
    curvature, not slope), so gradient checks resample when these are tiny.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    check_nonempty_segments(offsets)
    starts = offsets[:-1]
    X = np.asarray(values, dtype=np.float64)[:, None, :]
    P = np.asarray(P, dtype=np.float64)
    e, f, g, h = (P[:, j][None, :, None] for j in range(4, 8))
    gamma, delta = (P[:, j][None, :, None] for j in (10, 11))
    s3 = np.add.reduceat(X ** f, starts, axis=0)
    s4 = np.add.reduceat((1.0 - X) ** h, starts, axis=0)
    return gamma * s3 ** e + delta * s4 ** g


def laf_layer_forward(batch: SetBatch, layer: LafLayer) -> np.ndarray:
    """Plain-numpy layer application; no gradients recorded."""
    if batch.dim != layer.input_dim:
        raise DomainError(
            f"batch dimension {batch.dim} != layer input_dim {layer.input_dim}")
    out3, _ = _pool_forward(batch.values, batch.offsets, layer.param_array())
    m, r, d = out3.shape
    return out3.reshape(m, r * d)


def squash(x: Tensor) -> Tensor:
    """Map unbounded inputs into the unit's [0, 1] domain."""
    return sigmoid(x)


# ---------------------------------------------------------------------------
# presets (the classical aggregators as parameter settings)

PRESET_NAMES = ("constant", "max", "min", "sum", "nonzero_count", "mean",
                "kth_moment", "lth_power_kth_moment", "min_over_max",
                "max_over_min")


@dataclass(frozen=True)
class Preset:
    """A named classical aggregator with its limit/order arguments.

    r and s sharpen the soft max/min limits (exact as r, s -> inf);
    k and l pick moment order and outer power; kappa is the constant value.
    """

    name: str
    kappa: float = 1.0
    r: float = 1.0
    s: float = 1.0
    k: float = 1.0
    l: float = 1.0

    def __post_init__(self):
        if self.name not in PRESET_NAMES:
            raise ValueError(f"unknown preset '{self.name}'; valid: {PRESET_NAMES}")
        if self.r < 1 or self.s < 1:
            raise ValueError(f"preset limit orders must be >= 1, got r={self.r}, s={self.s}")


def preset_params(preset: Preset) -> LafParams:
    """Parameters realizing the named aggregator.

    Unused exponent pairs sit at the neutral (0, 1) and unused coefficients
    at 0, so every preset is well-defined on the whole domain.
    """
    a, b, c, d = 0.0, 1.0, 0.0, 1.0
    e, f, g, h = 0.0, 1.0, 0.0, 1.0
    alpha, beta, gamma, delta = 1.0, 0.0, 1.0, 0.0
    n = preset.name
    if n == "constant":
        alpha = preset.kappa
    elif n == "max":
        a, b = 1.0 / preset.r, preset.r
    elif n == "min":
        c, d = 1.0 / preset.r, preset.r
        beta = -1.0
    elif n == "sum":
        a, b = 1.0, 1.0
    elif n == "nonzero_count":
        a, b = 1.0, 0.0
    elif n == "mean":
        a, b = 1.0, 1.0
        e, f = 1.0, 0.0
    elif n == "kth_moment":
        a, b = 1.0, preset.k
        e, f = 1.0, 0.0
    elif n == "lth_power_kth_moment":
        a, b = preset.l, preset.k
        e, f = preset.l, 0.0
    elif n == "min_over_max":
        c, d = 1.0 / preset.r, preset.r
        beta = -1.0
        e, f = 1.0 / preset.s, preset.s
    elif n == "max_over_min":
        a, b = 1.0 / preset.r, preset.r
        g, h = 1.0 / preset.s, preset.s
        delta = -1.0
    return LafParams(a, b, c, d, e, f, g, h, alpha, beta, gamma, delta)


# ---------------------------------------------------------------------------
# initialization / projection / display


def init_params(rng: np.random.Generator) -> LafParams:
    """Exponents uniform on [0, 1], coefficients normal with std 0.01."""
    return LafParams.from_array(init_param_array(rng, 1)[0])


def init_param_array(rng: np.random.Generator, r: int) -> np.ndarray:
    P = np.empty((r, N_PARAMS))
    P[:, :8] = rng.uniform(0.0, 1.0, size=(r, 8))
    P[:, 8:] = rng.normal(0.0, 0.01, size=(r, 4))
    return P


def project_params(p: LafParams) -> LafParams:
    arr = p.as_array()
    arr[:8] = np.maximum(arr[:8], 0.0)
    return LafParams.from_array(arr)


def project_param_array(P: np.ndarray) -> None:
    """In-place clamp of the exponent columns to the feasible region."""
    np.maximum(P[:, :8], 0.0, out=P[:, :8])


def format_unit(p: LafParams) -> str:
    """Human-readable rendering, two decimals per parameter."""
    def term(coef, base, inner, outer):
        return f"{coef:.2f}(Σ{base}^{inner:.2f})^{outer:.2f}"

    num = term(p.alpha, "x", p.b, p.a) + " + " + term(p.beta, "(1-x)", p.d, p.c)
    den = term(p.gamma, "x", p.f, p.e) + " + " + term(p.delta, "(1-x)", p.h, p.g)
    return num + " / " + den


# ---------------------------------------------------------------------------
# sum-encoding injectivity probe


def sum_encoding_injectivity(domain_size: int, max_card: int, seed: int,
                             phi=None) -> bool:
    """Check that summing random element codes separates all multisets.

    Draws codes phi ~ U[0, 1) for each of ``domain_size`` elements (unless
    an explicit ``phi`` is given), enumerates every multiset of cardinality
    0..max_card, and reports whether all encoded sums are pairwise distinct
    (gap > 1e-12 after sorting). With random codes this holds almost surely;
    a crafted phi (say phi_1 = 2 * phi_0) defeats it.
    """
    if domain_size < 1 or max_card < 0:
        raise ValueError("need domain_size >= 1 and max_card >= 0")
    total = sum(math.comb(domain_size + k - 1, k) for k in range(max_card + 1))
    if total > 100_000:
        raise ValueError(f"enumeration budget exceeded: {total} multisets > 100000")
    if phi is None:
        rng = np.random.default_rng(seed)
        phi = rng.uniform(0.0, 1.0, size=domain_size)
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (domain_size,):
        raise ValueError(f"phi must have shape ({domain_size},), got {phi.shape}")

    sums = np.empty(total)
    sums[0] = 0.0  # the empty multiset
    pos = 1
    for k in range(1, max_card + 1):
        for combo in itertools.combinations_with_replacement(range(domain_size), k):
            sums[pos] = phi[list(combo)].sum()
            pos += 1
    sums.sort()
    return bool(np.all(np.diff(sums) > 1e-12))
