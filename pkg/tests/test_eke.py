import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tensorgrid import errors
from tensorgrid.client import connect
from tensorgrid.eke import (
    FeatureVector,
    PreprocessParams,
    SampleWeights,
    build_preprocess_script,
    demo_inference,
    eke_decode,
    feature_arrays,
    fit_params,
    fit_standardizer,
    fp,
    fp_inv,
    inverse_density_weights,
    local_pipeline,
    preprocess,
    stub_eke_model,
    synthetic_feature_grid,
    weighted_epoch_sample,
)
from tensorgrid.engine import parse_script, run_script_exec


class TestFp:
    def test_zero(self):
        assert fp(0.0, 36.0) == 0.0

    def test_one_gives_c(self):
        assert fp(1.0, 36.0) == 36.0  # ln(1) + 36

    def test_minus_e(self):
        assert fp(-math.e, 36.0) == pytest.approx(-37.0, rel=1e-15)  # -ln(e) - 36

    @given(st.floats(min_value=-50, max_value=50))
    @settings(max_examples=200, deadline=None)
    def test_odd(self, exponent):
        x = 10.0**exponent
        assert fp(-x) == -fp(x)

    def test_strictly_increasing_each_branch(self):
        xs = np.geomspace(1e-15, 1e6, 500)
        pos = np.array([fp(float(x)) for x in xs])
        assert np.all(np.diff(pos) > 0)
        neg = np.array([fp(float(-x)) for x in xs[::-1]])
        assert np.all(np.diff(neg) > 0)

    def test_injective_overall_above_cutoff(self):
        # with c > |ln eps| the positive branch stays positive and the
        # negative branch negative, so the two never collide
        eps = 1e-15
        assert fp(eps) > 0 > fp(-eps)
        xs = np.concatenate([-np.geomspace(eps, 1e6, 300), [0.0], np.geomspace(eps, 1e6, 300)])
        ys = [fp(float(x)) for x in xs]
        assert len(set(ys)) == len(ys)

    def test_inverse_identity(self):
        for x in np.geomspace(1e-15, 1e6, 400):
            assert fp_inv(fp(float(x))) == pytest.approx(x, rel=1e-12)
            assert fp_inv(fp(float(-x))) == pytest.approx(-x, rel=1e-12)

    def test_fp_inv_examples(self):
        assert fp_inv(36.0, 36.0) == 1.0
        assert fp_inv(0.0, 36.0) == 0.0
        with pytest.raises(errors.DomainError):
            fp_inv(1.0, 36.0)  # below fp(eps) ~ 1.46: not in the image


class TestStandardizer:
    def test_constant_is_degenerate(self):
        with pytest.raises(errors.DegenerateFeature):
            fit_standardizer([1.0, 1.0, 1.0])

    def test_population_convention(self):
        assert fit_standardizer([0.0, 2.0]) == (1.0, 1.0)

    def test_standardized_output_is_normalized(self):
        rng = np.random.default_rng(3)
        samples = rng.normal(5, 3, 500)
        mean, std = fit_standardizer(samples)
        z = (samples - mean) / std
        assert abs(z.mean()) < 1e-12
        assert abs(z.std(ddof=0) - 1) < 1e-12

    def test_needs_two_samples(self):
        with pytest.raises(errors.DegenerateFeature):
            fit_standardizer([4.0])


def demo_params() -> PreprocessParams:
    return PreprocessParams(
        feature_means=(-4.0, 0.5, 0.0, -7.0),
        feature_stds=(1.5, 0.2, 20.0, 1.0),
        target_mean=-9.0,
        target_std=1.2,
    )


class TestPreprocess:
    def test_means_map_to_zero(self):
        p = demo_params()
        fv = FeatureVector(
            mke=math.exp(p.feature_means[0]),
            rossby_norm=p.feature_means[1],
            rel_vorticity=0.0,  # fp(0) = 0 = stored mean
            isopycnal_slope=math.exp(p.feature_means[3]),
        )
        np.testing.assert_allclose(preprocess(fv, p), np.zeros(4, dtype=np.float32), atol=1e-7)

    def test_zero_mke_is_domain_error(self):
        with pytest.raises(errors.DomainError):
            preprocess(FeatureVector(0.0, 0.5, 1e-6, 1e-3), demo_params())

    def test_subcutoff_vorticity_clamps_to_zero(self):
        p = demo_params()
        a = preprocess(FeatureVector(1.0, 0.5, p.epsilon / 2, 1e-3), p)
        b = preprocess(FeatureVector(1.0, 0.5, 0.0, 1e-3), p)
        assert a[2] == b[2]

    def test_output_is_f32_quad(self):
        out = preprocess(FeatureVector(1.0, 0.5, 1e-6, 1e-3), demo_params())
        assert out.dtype == np.float32 and out.shape == (4,)

    def test_params_validation(self):
        with pytest.raises(errors.DomainError):
            PreprocessParams((0, 0, 0, 0), (1, 1, 1, 1), 0, 1, c=-40.0, epsilon=1e-15)
        with pytest.raises(errors.DegenerateFeature):
            PreprocessParams((0, 0, 0, 0), (1, 0, 1, 1), 0, 1)

    def test_params_sidecar_roundtrip(self):
        p = demo_params()
        assert PreprocessParams.from_json(p.to_json()) == p

    def test_matches_stored_script(self):
        p = demo_params()
        script = parse_script(build_preprocess_script(p))
        rng = np.random.default_rng(1)
        mke = rng.lognormal(-4, 1, 32)
        rossby = rng.normal(0.5, 0.2, 32)
        vort = rng.normal(0, 1e-5, 32)
        slope = rng.lognormal(-7, 1, 32)
        stacked = run_script_exec(script, [mke, rossby, vort, slope])
        for i in range(32):
            fv = FeatureVector(mke[i], rossby[i], vort[i], slope[i])
            np.testing.assert_allclose(preprocess(fv, p), stacked[i], rtol=1e-5, atol=1e-6)


class TestDecode:
    def test_zero_decodes_to_mean(self):
        p = demo_params()
        assert eke_decode(0.0, p) == pytest.approx(math.exp(p.target_mean), rel=1e-15)

    def test_encode_decode_roundtrip(self):
        p = demo_params()
        for eke in (1e-6, 1e-3, 0.5, 42.0):
            encoded = (math.log(eke) - p.target_mean) / p.target_std
            assert eke_decode(encoded, p) == pytest.approx(eke, rel=1e-10)

    def test_always_positive(self):
        p = demo_params()
        for y in (-50.0, -1.0, 0.0, 1.0, 50.0):
            assert eke_decode(y, p) > 0


class TestInverseDensityWeights:
    def test_uniform_values_near_equal_weights(self):
        values = np.linspace(0, 1, 640)
        w = inverse_density_weights(values, n_bins=64).weights
        assert w.max() / w.min() == pytest.approx(1.0, rel=1e-9)

    def test_rare_bin_gets_9x_weight(self):
        values = np.array([0.1] * 9 + [0.9])
        w = inverse_density_weights(values, n_bins=2).weights
        assert w[-1] / w[0] == pytest.approx(9.0, rel=1e-12)

    def test_identical_values_degenerate(self):
        with pytest.raises(errors.DegenerateRange):
            inverse_density_weights(np.ones(100))

    def test_weights_normalized(self):
        rng = np.random.default_rng(0)
        w = inverse_density_weights(rng.lognormal(0, 1, 1000)).weights
        assert w.sum() == pytest.approx(1.0, rel=1e-12)

    def test_flattens_lognormal_draws(self):
        rng = np.random.default_rng(7)
        values = rng.lognormal(0, 1, 20_000)
        sw = inverse_density_weights(values, n_bins=32)
        draws_w = weighted_epoch_sample(values.size, sw, fraction=1.0, seed=1)
        uniform = SampleWeights(np.full(values.size, 1.0 / values.size))
        draws_u = weighted_epoch_sample(values.size, uniform, fraction=1.0, seed=1)
        lo, hi = values.min(), values.max()
        width = (hi - lo) / 32
        idx = np.minimum(((values - lo) / width).astype(int), 31)
        occupied = np.unique(idx)

        def ratio(draws):
            counts = np.bincount(idx[draws], minlength=32)[occupied]
            return counts.max() / max(counts.min(), 1)

        assert ratio(draws_w) < ratio(draws_u)


class TestWeightedEpochSample:
    def test_tenth_of_1000_is_100(self):
        w = SampleWeights(np.full(1000, 1e-3))
        assert weighted_epoch_sample(1000, w, seed=0).shape == (100,)

    def test_concentrated_weights(self):
        n = 64
        weights = np.full(n, 1e-9 / (n - 1))
        weights[0] = 1 - 1e-9
        w = SampleWeights(weights)
        draws = weighted_epoch_sample(n, w, fraction=1.0, seed=2)
        assert np.mean(draws == 0) > 0.999

    def test_deterministic_for_seed(self):
        w = SampleWeights(np.full(50, 0.02))
        a = weighted_epoch_sample(50, w, seed=9)
        b = weighted_epoch_sample(50, w, seed=9)
        np.testing.assert_array_equal(a, b)

    def test_frequencies_track_weights(self):
        rng = np.random.default_rng(11)
        n = 500
        w = SampleWeights(rng.random(n) + 0.1)
        draws = weighted_epoch_sample(n, w, fraction=200.0, seed=3)  # 100k draws
        freq = np.bincount(draws, minlength=n) / draws.size
        order = np.argsort(w.weights)
        for dec in range(10):
            sel = order[dec * 50 : (dec + 1) * 50]
            assert freq[sel].sum() == pytest.approx(w.weights[sel].sum(), rel=0.05)


class TestDemo:
    def test_demo_matches_local_pipeline(self, cluster2):
        grid = synthetic_feature_grid(8, 8, seed=3)
        params = fit_params(grid)
        model_blob = stub_eke_model(3)
        script_blob = build_preprocess_script(params)
        with connect(cluster2.seed_address) as c:
            c.set_model("eke-model", model_blob, batch_size=10_000)
            c.set_script("eke-preprocess", script_blob)
            field = demo_inference(c, grid, params)
        reference = local_pipeline(grid, params, model_blob=model_blob, script_blob=script_blob)
        assert np.all(field > 0)
        np.testing.assert_allclose(field, reference, rtol=1e-6)

    def test_two_concurrent_members_eight_rounds(self, cluster2):
        grid = synthetic_feature_grid(4, 4, seed=5)
        params = fit_params(grid)
        model_blob = stub_eke_model(5)
        script_blob = build_preprocess_script(params)
        with connect(cluster2.seed_address) as admin:
            admin.set_model("eke-model", model_blob, batch_size=10_000)
            admin.set_script("eke-preprocess", script_blob)
        reference = local_pipeline(grid, params, model_blob=model_blob, script_blob=script_blob)
        failures = []

        def member(idx):
            try:
                with connect(cluster2.seed_address, key_prefix=f"member{idx}.") as c:
                    for _ in range(8):  # one simulated day
                        field = demo_inference(c, grid, params)
                        np.testing.assert_allclose(field, reference, rtol=1e-6)
            except Exception as e:  # propagate to the main thread
                failures.append(e)

        threads = [threading.Thread(target=member, args=(i,)) for i in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=60)
        assert not failures

    def test_feature_arrays_order(self):
        grid = [[FeatureVector(1.0, 2.0, 3.0, 4.0)]]
        mke, rossby, vort, slope = feature_arrays(grid)
        assert (mke[0], rossby[0], vort[0], slope[0]) == (1.0, 2.0, 3.0, 4.0)

    def test_constant_model_gives_uniform_decoded_mean(self, cluster2):
        # zero weights + zero bias: standardized output 0 everywhere, so the
        # field decodes to exp(target_mean) uniformly
        from tensorgrid.engine import Dense, ModelSpec, dump_model

        grid = synthetic_feature_grid(4, 4, seed=8)
        params = fit_params(grid)
        blob = dump_model(
            ModelSpec("eke-model", (Dense(4, 1, np.zeros((1, 4)), np.zeros(1)),))
        )
        with connect(cluster2.seed_address) as c:
            c.set_model("eke-model", blob)
            c.set_script("eke-preprocess", build_preprocess_script(params))
            field = demo_inference(c, grid, params)
        np.testing.assert_allclose(field, math.exp(params.target_mean), rtol=1e-6)
