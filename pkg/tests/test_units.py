"""Aggregation units: presets, gradients, pooling, invariances."""

import math

import numpy as np
import pytest

from laf import units
from laf.ndcore import DomainError, SetBatch, Tape, Tensor, grad_check, mul, tsum
from laf.units import (
    LafLayer,
    LafParams,
    Preset,
    format_unit,
    init_param_array,
    init_params,
    l_ab,
    laf_backward,
    laf_forward,
    laf_layer_forward,
    laf_pool,
    preset_params,
    project_params,
    sum_encoding_injectivity,
)

# brute-force references, written independently in terms of python builtins


def ref_sum(xs):
    return float(sum(float(v) for v in xs))


def ref_mean(xs):
    return ref_sum(xs) / len(xs)


def ref_moment(xs, k):
    return sum(float(v) ** k for v in xs) / len(xs)


def _random_set(rng, lo=0.01, hi=0.99):
    return rng.uniform(lo, hi, size=int(rng.integers(2, 11)))


class TestPresets:
    def test_constant(self):
        p = preset_params(Preset("constant", kappa=0.25))
        rng = np.random.default_rng(0)
        for _ in range(200):
            assert abs(laf_forward(_random_set(rng), p) - 0.25) < 1e-12

    def test_exact_rows_match_brute_force(self):
        rng = np.random.default_rng(1)
        rows = [
            (Preset("sum"), ref_sum),
            (Preset("mean"), ref_mean),
            (Preset("nonzero_count"), lambda xs: float(len(xs))),
            (Preset("kth_moment", k=2), lambda xs: ref_moment(xs, 2)),
            (Preset("kth_moment", k=3), lambda xs: ref_moment(xs, 3)),
            (Preset("lth_power_kth_moment", l=2, k=1),
             lambda xs: ref_mean(xs) ** 2),
            (Preset("lth_power_kth_moment", l=3, k=2),
             lambda xs: ref_moment(xs, 2) ** 3),
        ]
        for preset, ref in rows:
            p = preset_params(preset)
            for _ in range(300):
                xs = _random_set(rng)
                assert abs(laf_forward(xs, p) - ref(xs)) < 1e-9

    def test_nonzero_count_counts_nonzeros(self):
        # 0^0 = 1 means exact zeros are still counted by the b=0 power sum;
        # on positive elements the row is exactly the cardinality
        p = preset_params(Preset("nonzero_count"))
        assert abs(laf_forward([0.5, 0.5, 0.5], p) - 3.0) < 1e-12

    def test_max_min_within_limit_envelope(self):
        rng = np.random.default_rng(2)
        r = 40.0
        pmax = preset_params(Preset("max", r=r))
        pmin = preset_params(Preset("min", r=r))
        for _ in range(300):
            xs = _random_set(rng)
            env = len(xs) ** (1.0 / r) - 1.0
            err_max = abs(laf_forward(xs, pmax) - max(xs))
            err_min = abs(laf_forward(xs, pmin) - min(xs))
            assert err_max <= max(xs) * env + 1e-12
            assert err_min <= max(1.0 - xs) * env + 1e-12

    def test_max_limit_tightens_with_r(self):
        xs = np.array([0.3, 0.551, 0.72])
        errs = [abs(laf_forward(xs, preset_params(Preset("max", r=r))) - 0.72)
                for r in (5, 20, 80, 320)]
        assert all(e1 >= e2 - 1e-15 for e1, e2 in zip(errs, errs[1:]))
        assert errs[-1] < 1e-3

    def test_ratio_rows_converge(self):
        # r, s = 200 keeps (1-x)^r away from underflow on this range
        rng = np.random.default_rng(3)
        pmm = preset_params(Preset("min_over_max", r=200, s=200))
        pxm = preset_params(Preset("max_over_min", r=200, s=200))
        for _ in range(100):
            xs = rng.uniform(0.4, 0.9, size=int(rng.integers(2, 7)))
            assert laf_forward(xs, pmm) == pytest.approx(min(xs) / max(xs), abs=0.05)
            assert laf_forward(xs, pxm) == pytest.approx(max(xs) / min(xs), abs=0.2)

    def test_preset_validation(self):
        with pytest.raises(ValueError, match="unknown preset"):
            Preset("softmax")
        with pytest.raises(ValueError, match=">= 1"):
            Preset("max", r=0.5)

    def test_preset_exponents_nonnegative(self):
        for name in units.PRESET_NAMES:
            p = preset_params(Preset(name, kappa=1.5, r=7, s=3, k=2, l=2))
            assert np.all(p.as_array()[:8] >= 0.0)


class TestLab:
    def test_zero_insertion_is_neutral(self):
        # 0^b = 0 for b > 0, and the zero sorts to the front where 0 + a
        # is exact -- bitwise neutral while the reduction is sequential
        # (short sets); longer sums regroup, so only ~ulp agreement there
        rng = np.random.default_rng(4)
        for _ in range(500):
            xs = _random_set(rng)
            a, b = rng.uniform(0.1, 5.0, size=2)
            with_zero = np.concatenate([xs, [0.0]])
            got, ref = l_ab(with_zero, a, b), l_ab(xs, a, b)
            if len(with_zero) < 8:  # numpy sums sequentially below 8
                assert got == ref
            else:
                assert got == pytest.approx(ref, rel=1e-12)

    def test_pow_zero_conventions(self):
        # 0^0 = 1 inside and outside the sum
        assert l_ab([0.0, 0.0], 1.0, 0.0) == 2.0   # sum of 0^0
        assert l_ab([0.0], 0.0, 1.0) == 1.0        # (0)^0
        assert l_ab([0.0], 2.0, 3.0) == 0.0

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            l_ab([0.5], -1.0, 1.0)
        with pytest.raises(DomainError):
            l_ab([1.5], 1.0, 1.0)
        with pytest.raises(DomainError):
            l_ab([], 1.0, 1.0)
        with pytest.raises(DomainError):
            l_ab([-0.1], 1.0, 1.0)


class TestForward:
    def test_denominator_stabilization_keeps_output_finite(self):
        # gamma = delta = 0 makes the raw denominator exactly 0; it is
        # clamped to +1e-8 so the ratio is finite and huge, not inf
        p = LafParams(1, 1, 0, 1, 0, 1, 0, 1, 1.0, 0.0, 0.0, 0.0)
        v = laf_forward([0.5, 0.25], p)
        assert np.isfinite(v)
        assert v == pytest.approx(0.75 / 1e-8)

    def test_negative_denominator_keeps_sign(self):
        p = LafParams(1, 1, 0, 1, 0, 1, 0, 1, 1.0, 0.0, -1e-12, 0.0)
        v = laf_forward([0.5], p)
        assert v == pytest.approx(0.5 / -1e-8)

    def test_rejects_bad_sets(self):
        p = preset_params(Preset("mean"))
        with pytest.raises(DomainError):
            laf_forward([], p)
        with pytest.raises(DomainError):
            laf_forward([1.2], p)

    def test_rejects_negative_exponents(self):
        p = LafParams(-0.5, 1, 0, 1, 0, 1, 0, 1, 1, 0, 1, 0)
        with pytest.raises(DomainError):
            laf_forward([0.5], p)


class TestVarianceComposition:
    def test_moment_minus_squared_mean_is_variance(self):
        rng = np.random.default_rng(5)
        p2 = preset_params(Preset("kth_moment", k=2))
        pm2 = preset_params(Preset("lth_power_kth_moment", l=2, k=1))
        for _ in range(400):
            xs = _random_set(rng)
            var = laf_forward(xs, p2) - laf_forward(xs, pm2)
            ref = float(np.mean((xs - np.mean(xs)) ** 2))
            assert abs(var - ref) < 1e-9


class TestBackward:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        h = 1e-6
        checked = 0
        while checked < 150:
            xs = rng.uniform(0.05, 0.95, size=int(rng.integers(2, 9)))
            P = init_param_array(rng, 1)[0]
            P[:8] = rng.uniform(0.1, 2.5, size=8)
            P[8:] = rng.normal(0.0, 1.0, size=4)
            p = LafParams.from_array(P)
            den = (p.gamma * l_ab(xs, p.e, p.f)
                   + p.delta * l_ab(1.0 - xs, p.g, p.h))
            if abs(den) < 1e-2:
                continue
            checked += 1
            gx, gp = laf_backward(xs, p)
            for i in range(len(xs)):
                pert = xs.copy()
                pert[i] += h
                hi = laf_forward(pert, p)
                pert[i] -= 2 * h
                lo = laf_forward(pert, p)
                fd = (hi - lo) / (2 * h)
                assert abs(gx[i] - fd) / max(1e-8, abs(gx[i]) + abs(fd)) < 1e-5
            for j in range(12):
                q = P.copy()
                q[j] += h
                hi = laf_forward(xs, LafParams.from_array(q))
                q[j] -= 2 * h
                lo = laf_forward(xs, LafParams.from_array(q))
                fd = (hi - lo) / (2 * h)
                assert abs(gp[j] - fd) / max(1e-8, abs(gp[j]) + abs(fd)) < 1e-5

    def test_upstream_scales_linearly(self):
        rng = np.random.default_rng(7)
        xs = rng.uniform(0.1, 0.9, size=5)
        p = LafParams.from_array(np.concatenate([rng.uniform(0.2, 2, 8),
                                                 rng.normal(0, 1, 4)]))
        gx1, gp1 = laf_backward(xs, p, upstream=1.0)
        gx3, gp3 = laf_backward(xs, p, upstream=3.0)
        np.testing.assert_allclose(gx3, 3.0 * gx1, rtol=1e-12)
        np.testing.assert_allclose(gp3, 3.0 * gp1, rtol=1e-12)

    def test_boundary_elements_stay_finite(self):
        # elements at 0 and 1 with fractional exponents: the power rule has
        # no finite value at base 0, so those contributions are defined as 0
        p = LafParams(0.7, 0.4, 0.6, 0.3, 1.0, 1.0, 0.0, 1.0, 1.0, 0.5, 1.0, 0.0)
        gx, gp = laf_backward(np.array([0.0, 1.0, 0.5]), p)
        assert np.all(np.isfinite(gx)) and np.all(np.isfinite(gp))

    def test_clamped_denominator_blocks_gradient(self):
        p = LafParams(1, 1, 0, 1, 0, 1, 0, 1, 1.0, 0.0, 0.0, 0.0)
        gx, gp = laf_backward(np.array([0.5, 0.25]), p)
        # num path still flows (scaled by the clamped denominator)...
        assert gp[8] == pytest.approx(0.75 / 1e-8)
        # ...but nothing flows into the dead denominator coefficients
        assert gp[10] == 0.0 and gp[11] == 0.0


class TestPool:
    def _batch_and_params(self, rng, m=5, d=3, r=4):
        sets = [rng.uniform(0.0, 1.0, size=(int(rng.integers(2, 7)), d))
                for _ in range(m)]
        batch = SetBatch.from_sets(sets)
        P = init_param_array(rng, r)
        P[:, 8:] = rng.normal(0.0, 1.0, size=(r, 4))
        return sets, batch, P

    def test_matches_scalar_unit_per_dimension(self):
        rng = np.random.default_rng(8)
        sets, batch, P = self._batch_and_params(rng)
        out = laf_pool(Tensor(batch.values), batch.offsets, Tensor(P)).data
        for i, s in enumerate(sets):
            for k in range(P.shape[0]):
                p = LafParams.from_array(P[k])
                for j in range(s.shape[1]):
                    ref = laf_forward(s[:, j], p)
                    # rel tolerance: near-singular denominators blow values
                    # up to ~1e8 where 1e-12 absolute would be unreachable
                    assert out[i, k * s.shape[1] + j] == pytest.approx(
                        ref, rel=1e-9, abs=1e-12)

    def test_bitwise_permutation_invariance(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            sets, batch, P = self._batch_and_params(rng)
            out = laf_pool(Tensor(batch.values), batch.offsets, Tensor(P)).data
            shuffled = SetBatch.from_sets([s[rng.permutation(len(s))] for s in sets])
            out2 = laf_pool(Tensor(shuffled.values), shuffled.offsets, Tensor(P)).data
            assert np.array_equal(out, out2)

    def test_gradients_match_fd(self):
        # keep values off the [0, 1] walls (the FD probe steps +-1e-6) and
        # exponents away from 0 so perturbed points stay in the domain
        rng = np.random.default_rng(10)
        sets = [rng.uniform(0.05, 0.95, size=(int(rng.integers(2, 7)), 2))
                for _ in range(4)]
        batch = SetBatch.from_sets(sets)
        P = init_param_array(rng, 3)
        P[:, :8] = rng.uniform(0.1, 2.0, size=(3, 8))
        P[:, 8:] = rng.normal(0.0, 1.0, size=(3, 4))
        w = rng.normal(size=(4, 6))
        params_t = Tensor(P)
        vals_t = Tensor(batch.values)

        def f_x(v):
            return tsum(mul(laf_pool(v, batch.offsets, params_t), Tensor(w)))

        def f_p(q):
            return tsum(mul(laf_pool(vals_t, batch.offsets, q), Tensor(w)))

        assert grad_check(f_x, batch.values) < 1e-5
        assert grad_check(f_p, P) < 1e-5

    def test_gradient_accumulates_into_both_inputs(self):
        rng = np.random.default_rng(11)
        _, batch, P = self._batch_and_params(rng, m=3, d=2, r=2)
        x = Tensor(batch.values)
        params = Tensor(P)
        with Tape() as tape:
            out = laf_pool(x, batch.offsets, params)
            tape.backward(tsum(out))
        assert x.grad is not None and x.grad.shape == x.data.shape
        assert params.grad is not None and params.grad.shape == (2, 12)

    def test_empty_set_reports_batch_index(self):
        values = np.array([[0.5], [0.5]])
        offsets = np.array([0, 2, 2])
        with pytest.raises(DomainError, match="batch index 1"):
            laf_pool(Tensor(values), offsets, Tensor(init_param_array(np.random.default_rng(0), 2)))

    def test_out_of_domain_values_rejected(self):
        P = init_param_array(np.random.default_rng(0), 2)
        with pytest.raises(DomainError, match=r"\[0, 1\]"):
            laf_pool(Tensor([[1.5], [0.5]]), np.array([0, 2]), Tensor(P))

    def test_layer_forward_is_unit_major(self):
        rng = np.random.default_rng(12)
        layer = LafLayer([preset_params(Preset("sum")),
                          preset_params(Preset("mean"))], input_dim=2)
        s = rng.uniform(0, 1, size=(4, 2))
        out = laf_layer_forward(SetBatch.from_sets([s]), layer)
        assert out.shape == (1, 4)
        np.testing.assert_allclose(out[0, :2], s.sum(axis=0), atol=1e-12)
        np.testing.assert_allclose(out[0, 2:], s.mean(axis=0), atol=1e-12)

    def test_layer_dim_mismatch(self):
        layer = LafLayer([preset_params(Preset("sum"))], input_dim=3)
        with pytest.raises(DomainError, match="input_dim"):
            laf_layer_forward(SetBatch.from_sets([np.zeros((2, 2))]), layer)


class TestInitProjectFormat:
    def test_init_ranges(self):
        rng = np.random.default_rng(13)
        P = init_param_array(rng, 200)
        assert np.all((P[:, :8] >= 0.0) & (P[:, :8] <= 1.0))
        assert np.abs(P[:, 8:]).max() < 0.1  # 10 sigma of N(0, 0.01)
        p = init_params(np.random.default_rng(13))
        assert np.all(p.as_array()[:8] >= 0.0)

    def test_projection_clamps_exponents_only(self):
        p = LafParams(-1.0, 0.5, -0.1, 1.0, 2.0, -3.0, 0.0, 1.0,
                      -2.0, 5.0, -0.5, 0.25)
        q = project_params(p)
        assert q.a == 0.0 and q.c == 0.0 and q.f == 0.0
        assert q.b == 0.5 and q.e == 2.0
        # coefficients pass through untouched, signs included
        assert (q.alpha, q.beta, q.gamma, q.delta) == (-2.0, 5.0, -0.5, 0.25)

    def test_project_array_in_place(self):
        P = np.array([[-1.0, 2.0, -3.0, 0.5, 0.0, -0.25, 1.0, 1.0,
                       -9.0, 9.0, -9.0, 9.0]])
        units.project_param_array(P)
        assert np.all(P[0, :8] >= 0.0)
        np.testing.assert_array_equal(P[0, 8:], [-9.0, 9.0, -9.0, 9.0])

    def test_format_unit_sum_preset(self):
        text = format_unit(preset_params(Preset("sum")))
        assert text == ("1.00(Σx^1.00)^1.00 + 0.00(Σ(1-x)^1.00)^0.00 / "
                        "1.00(Σx^1.00)^0.00 + 0.00(Σ(1-x)^1.00)^0.00")

    def test_format_roundtrips_parameter_values(self):
        p = LafParams(1.51, 0.62, 0.3, 1.0, 0.0, 0.5, 1.0, 0.25,
                      1.51, 0.0, 0.0, 1.51)
        text = format_unit(p)
        assert "1.51(Σx^0.62)^1.51" in text
        assert text.count("Σ") == 4 and text.count("/") == 1


class TestInjectivity:
    def test_random_codes_separate_small_multisets(self):
        for seed in range(25):
            assert sum_encoding_injectivity(6, 4, seed) is True

    def test_enumeration_count_matches_stars_and_bars(self):
        total = sum(math.comb(6 + k - 1, k) for k in range(5))
        assert total == 210  # domain 6, cardinalities 0..4

    def test_crafted_collision_detected(self):
        rng = np.random.default_rng(0)
        phi = rng.uniform(0.0, 1.0, size=6)
        phi[1] = 2.0 * phi[0]  # {1} collides with {0, 0}
        assert sum_encoding_injectivity(6, 4, 0, phi=phi) is False

    def test_budget_guard(self):
        with pytest.raises(ValueError, match="budget"):
            sum_encoding_injectivity(40, 10, 0)

    def test_domain_size_one(self):
        # multisets {0}, {0,0}, ... have sums phi_0 * k: distinct unless 0
        assert sum_encoding_injectivity(1, 5, 3) is True
        assert sum_encoding_injectivity(1, 5, 0, phi=np.array([0.0])) is False
