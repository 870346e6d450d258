import numpy as np
import pytest

from stablenet.certify import (
    BOUND_RTOL,
    SQRT2,
    apply_effective_residual,
    assemble_certificate,
    check_lemma_nonexpansive,
    effective_layers,
    operator_norm,
    opnorm_l2,
    opnorm_l2_fft,
    opnorm_linf,
    verify_growth,
    verify_sensitivity,
)
from stablenet.conv import PaddingMode, adjoint_conv, materialize
from stablenet.errors import ConvergenceError
from stablenet.network import NetworkSpec, forward_cache
from stablenet.train import init_params

from netutil import random_net

P, Z = PaddingMode.PERIODIC, PaddingMode.ZERO


def centre(n=3, d=1, value=1.0):
    K = np.zeros((n, n, d, d))
    c = (n - 1) // 2
    for i in range(d):
        K[c, c, i, i] = value
    return K


def dense_sigma(K, h, w, stride, pad):
    return np.linalg.svd(materialize(K, h, w, stride, pad), compute_uv=False)[0]


class TestOpnormL2:
    def test_scaled_identity(self):
        est, _ = opnorm_l2(centre(value=2.0), 5, 5)
        assert est == pytest.approx(2.0, rel=1e-9)

    def test_zero(self):
        assert opnorm_l2(np.zeros((3, 3, 2, 2)), 4, 4) == (0.0, 0)

    @pytest.mark.parametrize("pad,stride", [(P, 1), (Z, 1), (Z, 2), (P, 2)])
    def test_matches_dense_svd(self, pad, stride):
        for seed in range(25):
            K = np.random.default_rng(seed).standard_normal((3, 3, 2, 2))
            est, _ = opnorm_l2(K, 6, 6, stride, pad)
            ref = dense_sigma(K, 6, 6, stride, pad)
            assert abs(est - ref) <= 1e-8 * ref

    def test_near_degenerate_top_pair(self):
        # top two singular values agree to 1e-4 relative
        K = np.random.default_rng(0).standard_normal((3, 3, 2, 2))
        sv = np.linalg.svd(materialize(K, 6, 6, 1, Z), compute_uv=False)
        assert sv[0] - sv[1] < 1e-3
        est, _ = opnorm_l2(K, 6, 6, 1, Z)
        assert abs(est - sv[0]) <= 1e-8 * sv[0]

    def test_deterministic(self):
        K = np.random.default_rng(1).standard_normal((3, 3, 2, 3))
        assert opnorm_l2(K, 5, 7, seed=3) == opnorm_l2(K, 5, 7, seed=3)

    def test_never_above_truth_by_much(self):
        K = np.random.default_rng(2).standard_normal((2, 2, 3, 1))
        est, _ = opnorm_l2(K, 4, 5, 2, Z)
        assert est <= dense_sigma(K, 4, 5, 2, Z) * (1 + 1e-12)

    def test_non_convergence_carries_estimate(self):
        K = np.random.default_rng(0).standard_normal((3, 3, 2, 2))
        with pytest.raises(ConvergenceError) as info:
            opnorm_l2(K, 6, 6, 1, Z, tol=1e-15, max_iter=3)
        assert info.value.estimate > 0
        assert info.value.iterations == 6

    def test_rejects_bad_tol(self):
        with pytest.raises(ValueError):
            opnorm_l2(centre(), 4, 4, tol=0.0)


class TestOtherL2Methods:
    @pytest.mark.parametrize("hw", [(4, 4), (5, 7), (2, 3)])
    def test_fft_matches_dense(self, hw):
        K = np.random.default_rng(3).standard_normal((3, 3, 2, 3))
        ref = dense_sigma(K, *hw, 1, P)
        assert opnorm_l2_fft(K, *hw) == pytest.approx(ref, rel=1e-12)

    def test_method_dispatch(self):
        K = np.random.default_rng(4).standard_normal((3, 3, 2, 2))
        vals = [operator_norm(K, 6, 6, 1, P, m) for m in ("power", "fft", "dense")]
        assert vals[0] == pytest.approx(vals[2], rel=1e-8)
        assert vals[1] == pytest.approx(vals[2], rel=1e-12)
        # fft falls back to the dense oracle where it does not apply
        assert operator_norm(K, 6, 6, 2, Z, "fft") == pytest.approx(dense_sigma(K, 6, 6, 2, Z))

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            operator_norm(centre(), 4, 4, method="lanczos")


def dense_linf(K, h, w, stride, pad):
    return np.abs(materialize(K, h, w, stride, pad)).sum(axis=1).max()


class TestOpnormLinf:
    def test_all_ones(self):
        K = np.ones((3, 3, 1, 1))
        assert opnorm_linf(K, P) == 9.0
        assert dense_linf(K, 5, 5, 1, P) == 9.0
        assert opnorm_linf(K, P, 5, 5) == 9.0

    def test_identity(self):
        assert opnorm_linf(centre(d=3), P) == 1.0
        assert opnorm_linf(centre(d=3), Z, 4, 4) == 1.0

    def test_zero_padding_dominated(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            K = rng.standard_normal((3, 3, 2, 2))
            assert opnorm_linf(K, Z, 5, 5) <= opnorm_linf(K, P, 5, 5)

    @pytest.mark.parametrize("pad", [P, Z])
    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_dense_exactly(self, pad, stride):
        rng = np.random.default_rng(6)
        for hw in [(5, 6), (3, 3), (2, 2), (1, 4)]:
            # dyadic rationals keep every sum exact
            K = rng.integers(-8, 9, (3, 3, 2, 3)) / 8.0
            assert opnorm_linf(K, pad, *hw, stride) == dense_linf(K, *hw, stride, pad)

    def test_closed_form_without_dims(self):
        K = np.random.default_rng(7).integers(-8, 9, (3, 3, 2, 3)) / 4.0
        expected = max(np.abs(K[:, :, :, j]).sum() for j in range(3))
        assert opnorm_linf(K) == expected == dense_linf(K, 6, 6, 1, P)


def certificate_oracle(spec, params):
    """Independent constants from materialized matrices."""
    pad = spec.padding
    factors, c_inf, c_l2 = [], 0.0, 0.0
    for info in spec.layers():
        pre = f"L{info.index}."
        if info.kind == "conv":
            h, w, _ = info.in_shape
            A = materialize(params[pre + "K"], h, w, 1, pad)
            factors.append(np.linalg.norm(A, 2))
            b = np.repeat(params[pre + "b"], info.out_shape[0] * info.out_shape[1])
            c_inf += np.abs(b).max()
            c_l2 += np.linalg.norm(b)
        elif info.kind == "res":
            h, w, _ = info.in_shape
            if spec.variant == "D":
                A1 = materialize(params[pre + "K1"], h, w, 1, pad)
                A2 = materialize(params[pre + "K2"], h, w, 1, pad)
                factors.append(1 + np.linalg.norm(A1, 2) * np.linalg.norm(A2, 2))
                b2 = np.repeat(params[pre + "b2"], h * w)
                c_inf += np.abs(b2).max()
                c_l2 += np.linalg.norm(b2)
            else:
                b1 = np.repeat(params[pre + "b1"], h * w)
                b2 = np.repeat(params[pre + "b2"], h * w)
                c_l2 += np.sqrt(2) * np.linalg.norm(b1) + np.linalg.norm(b2)
        elif info.kind == "pool":
            h, w, _ = info.in_shape
            factors.append(1 + np.linalg.norm(materialize(params[pre + "K"], h, w, 2, pad), 2))
        elif info.kind == "dense":
            factors.append(np.linalg.norm(params[pre + "W"], 2))
            c_inf += np.abs(params[pre + "b"]).max()
            c_l2 += np.linalg.norm(params[pre + "b"])
    if spec.variant == "S":
        factors = factors[1:-1]
    return float(np.prod(factors)), c_inf, c_l2


class TestCertificate:
    @pytest.mark.parametrize("variant", ["D", "S"])
    def test_zero_biases(self, variant):
        spec, params = random_net(variant, m=2, bias_scale=0.0)
        cert = assemble_certificate(spec, params, "dense")
        assert cert.c == 0.0
        assert cert.growth_constant_l2 == 0.0

    @pytest.mark.parametrize("variant", ["D", "S"])
    def test_matches_oracle(self, variant):
        spec, params = random_net(variant, m=2, seed=3, channels=2)
        cert = assemble_certificate(spec, params, "dense")
        a, c_inf, c_l2 = certificate_oracle(spec, params)
        assert cert.a == pytest.approx(a, rel=1e-12)
        assert cert.growth_constant_l2 == pytest.approx(c_l2, rel=1e-12)
        if variant == "D":
            assert cert.c == pytest.approx(c_inf, rel=1e-12)
            assert cert.growth_norm == "linf"
        else:
            assert cert.c == pytest.approx(c_l2, rel=1e-12)
            assert cert.growth_norm == "l2"

    def test_resnet_d_unit_norms(self):
        """Every operator of norm one: a = 1 * (1+1) * (1+1) * (1+1) * 1 = 8."""
        spec = NetworkSpec("D", 1, 4, 4, 1, 1, 2)
        params = init_params(spec, 0, "zeros")
        params.params["L0.K"] = centre()
        params.params["L1.K1"] = centre()
        params.params["L1.K2"] = centre()
        params.params["L2.K"] = centre(d=1)[:, :, :, [0, 0]] * [1.0, 0.0]
        params.params["L3.K"] = centre(d=2)[:, :, :, [0, 1, 1, 0]] * [1.0, 0.0, 0.0, 0.0]
        params.params["L5.W"] = np.eye(2, 4)
        cert = assemble_certificate(spec, params, "dense")
        assert cert.sensitivity_factors == pytest.approx([1.0, 2.0, 2.0, 2.0, 1.0], rel=1e-12)
        assert cert.a == pytest.approx(8.0, rel=1e-12)
        assert cert.a == pytest.approx(certificate_oracle(spec, params)[0], rel=1e-12)

    def test_resnet_s_depth_independent(self):
        base = NetworkSpec("S", 1, 8, 8, 1, 2, 3)
        fixed = random_net("S", m=1, seed=4)[1]
        values = []
        for m in range(1, 5):
            spec = NetworkSpec("S", m, 8, 8, 1, 2, 3)
            params = init_params(spec, 10 + m)
            names = {i.kind: i.index for i in base.layers()}
            layers = spec.layers()
            pools = [i.index for i in layers if i.kind == "pool"]
            params.params["L0.K"] = fixed["L0.K"]
            for src, dst in zip([2, 3], pools):
                params.params[f"L{dst}.K"] = fixed[f"L{src}.K"]
            params.params[f"L{layers[-1].index}.W"] = fixed[f"L{names['dense']}.W"]
            values.append(assemble_certificate(spec, params, "dense").a)
        assert len(set(values)) == 1

    def test_resnet_s_has_only_pool_factors(self):
        spec, params = random_net("S", m=3, seed=5)
        cert = assemble_certificate(spec, params, "dense")
        assert len(cert.sensitivity_factors) == 2

    def test_monotone_in_bias(self):
        for variant in ("D", "S"):
            spec, params = random_net(variant, m=2, seed=6)
            before = assemble_certificate(spec, params, "dense").c
            for name in ("L1.b2", "L0.b"):
                bumped = params.copy()
                bumped.params[name] = 3.0 * params[name]
                assert assemble_certificate(spec, bumped, "dense").c >= before

    def test_monotone_in_filter(self):
        for variant, name in (("D", "L1.K1"), ("D", "L3.K"), ("S", "L3.K")):
            spec, params = random_net(variant, m=1, seed=7)
            before = assemble_certificate(spec, params, "dense").a
            bumped = params.copy()
            bumped.params[name] = 2.0 * params[name]
            assert assemble_certificate(spec, bumped, "dense").a >= before

    def test_flags(self):
        spec, params = random_net("D", m=1, seed=8)
        assert assemble_certificate(spec, params, "dense").hypotheses_hold
        bad = params.copy()
        bad.params["L1.K2"] = -np.abs(params["L1.K2"])
        cert = assemble_certificate(spec, bad, "dense")
        assert not cert.flags["K2_nonnegative"]
        assert cert.sensitivity_valid()
        spec, params = random_net("S", m=1, seed=8)
        bad = params.copy()
        bad.params["L1.K"] = 2.0 * params["L1.K"]
        cert = assemble_certificate(spec, bad, "dense")
        assert not cert.flags["residual_l2_le_sqrt2"]
        assert not cert.sensitivity_valid()

    def test_power_and_dense_agree(self):
        spec, params = random_net("S", m=1, seed=9)
        a = assemble_certificate(spec, params, "power").a
        assert a == pytest.approx(assemble_certificate(spec, params, "dense").a, rel=1e-8)

    def test_text_field_order(self):
        spec, params = random_net("D", m=1, seed=10)
        text = assemble_certificate(spec, params, "dense").to_text()
        keys = [line.split(":")[0] for line in text.splitlines() if not line.startswith(" ")]
        assert keys[:6] == ["certificate", "variant", "m", "depth", "norm_method", "batchnorm_folded"]
        assert "flag.K2_nonnegative" in keys
        assert text == assemble_certificate(spec, params, "dense").to_text()


class TestBatchNormFolding:
    @pytest.mark.parametrize("variant", ["D", "S"])
    def test_effective_layer_matches_forward(self, variant):
        spec, params = random_net(variant, m=1, seed=11, batchnorm=True)
        entry = next(e for e in effective_layers(spec, params) if e["kind"] == "res")
        x0 = np.random.default_rng(0).standard_normal((3, 8, 8, 1))
        states, _ = forward_cache(spec, params, x0)
        folded = apply_effective_residual(states[1], entry, variant, spec.padding)
        np.testing.assert_allclose(folded, states[2], atol=1e-12)

    def test_s_batchnorm_breaks_symmetry(self):
        spec, params = random_net("S", m=1, seed=12, batchnorm=True)
        entry = next(e for e in effective_layers(spec, params) if e["kind"] == "res")
        assert not entry["symmetric"]
        u = np.random.default_rng(2).standard_normal((8, 8, 2))
        expected = adjoint_conv(u, params["L1.K"]) / params["L1.bn2.sigma"]
        np.testing.assert_allclose(adjoint_conv(u, entry["K2"]), expected, atol=1e-12)


class TestVerify:
    def test_zero_network(self):
        spec = NetworkSpec("D", 1, 8, 8, 1, 2, 3)
        params = init_params(spec, 0, "zeros")
        x = np.random.default_rng(0).standard_normal((4, 8, 8, 1))
        rep = verify_growth(spec, params, x)
        assert rep.ok
        for e, xi in zip(rep.entries, x):
            assert e["value"] == 0.0
            assert e["slack"] == pytest.approx(np.abs(xi).max())

    @pytest.mark.parametrize("variant", ["D", "S"])
    def test_random_admissible(self, variant):
        rng = np.random.default_rng(1)
        for seed in range(10):
            spec, params = random_net(variant, m=1 + seed % 3, seed=seed)
            cert = assemble_certificate(spec, params, "dense")
            x = rng.standard_normal((10, 8, 8, 1))
            assert verify_growth(spec, params, x, cert).ok
            pairs = [(xi, xi + 0.1 * rng.standard_normal(xi.shape)) for xi in x]
            assert verify_sensitivity(spec, params, pairs, cert).ok

    def test_scaled_dense_skips(self):
        spec, params = random_net("D", m=1, seed=2)
        W = params["L5.W"]
        params.params["L5.W"] = 5.0 * W / np.abs(W).sum(axis=1).max()
        cert = assemble_certificate(spec, params, "dense")
        assert cert.flags["dense_linf_le_1"] is False
        rep = verify_growth(spec, params, np.ones((8, 8, 1)), cert)
        assert rep.skipped and not rep.ok
        assert "dense_linf_le_1" in rep.diagnostic
        assert "skipped: true" in rep.to_text()

    def test_identical_pair(self):
        spec, params = random_net("S", m=1, seed=3)
        x = np.random.default_rng(4).standard_normal((8, 8, 1))
        rep = verify_sensitivity(spec, params, [(x, x)])
        assert rep.ok and rep.entries[0]["value"] == 0.0 and rep.entries[0]["bound"] == 0.0

    def test_violation_carries_trace(self):
        spec, params = random_net("D", m=1, seed=5, bias_scale=1.0)
        cert = assemble_certificate(spec, params, "dense")
        cert.growth_constant = 0.0
        x = np.zeros((2, 8, 8, 1))
        rep = verify_growth(spec, params, x, cert)
        bad = rep.violations
        assert bad and len(bad[0]["trace"]) == spec.depth + 1


def scalar_map(A, x):
    return x - A * np.maximum(A * x, 0.0)


class TestLemma:
    def test_zero_is_identity(self):
        rep = check_lemma_nonexpansive(np.zeros((3, 3)), trials=500)
        assert rep.max_ratio == pytest.approx(1.0, rel=1e-14)
        assert rep.ok

    def test_sqrt2_scalar(self):
        rep = check_lemma_nonexpansive(SQRT2, trials=100_000)
        assert rep.applicable and rep.violations == 0
        # slopes are exactly 1 and -1; only roundoff can exceed 1
        assert rep.max_ratio <= 1.0 + BOUND_RTOL

    def test_expansion_at_2_1(self):
        rep = check_lemma_nonexpansive(2.1, trials=1000)
        assert not rep.applicable
        assert rep.max_ratio == pytest.approx(abs(1 - 2.1**2), rel=1e-9)
        x, y = rep.witness
        assert abs(scalar_map(2.1, x[0]) - scalar_map(2.1, y[0])) > abs(x[0] - y[0])

    def test_norm_three_counterexample(self):
        # F(x) = x - 9 x_+ has slope -8 on the positive axis
        x, y = 1.0, 2.0
        assert abs(scalar_map(3.0, x) - scalar_map(3.0, y)) == 8.0
        assert check_lemma_nonexpansive(3.0, trials=1000).max_ratio > 1.0

    def test_random_matrices(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            A = rng.standard_normal((5, 4))
            A *= SQRT2 * rng.uniform(0.5, 1.0) / np.linalg.norm(A, 2)
            rep = check_lemma_nonexpansive(A, rng.standard_normal(5), trials=2000, seed=1)
            assert rep.applicable and rep.violations == 0

    def test_convolution_form(self):
        K = np.random.default_rng(7).standard_normal((3, 3, 2, 2))
        K *= SQRT2 / opnorm_l2_fft(K, 4, 4)
        rep = check_lemma_nonexpansive((K, (4, 4)), np.array([0.1, -0.2]), trials=500)
        assert rep.operator_norm == pytest.approx(SQRT2)
        assert rep.ok
