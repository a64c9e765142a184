"""Encoder: parameter bookkeeping, forward contract, tap, default_k."""

import numpy as np
import numpy.testing as npt
import pytest

from birq.autodiff import Tensor
from birq.encoder import (EncoderConfig, default_k, forward, forward_graph,
                          init_encoder, param_count, param_names,
                          params_to_tensors, tap, tap_graph)
from birq.errors import ConfigError

RNG = np.random.default_rng(77)

CFG = EncoderConfig(num_layers=2, dim_in=10, dim_hidden=8, num_heads=2,
                    dim_ff=16, num_codes=4, seed=5)


class TestParameters:
    def test_count_matches_summation(self):
        for cfg in (CFG,
                    EncoderConfig(num_layers=5, dim_in=160, dim_hidden=64,
                                  num_heads=4, dim_ff=128, num_codes=16),
                    EncoderConfig(num_layers=1, dim_in=3, dim_hidden=4,
                                  num_heads=1, dim_ff=5, num_codes=2)):
            params = init_encoder(cfg)
            total = sum(v.size for v in params.values())
            assert total == param_count(cfg)

    def test_init_deterministic(self):
        a = init_encoder(CFG)
        b = init_encoder(CFG)
        assert sorted(a) == sorted(b) == sorted(param_names(CFG))
        for name in a:
            npt.assert_array_equal(a[name], b[name])

    def test_seed_changes_weights(self):
        a = init_encoder(CFG)
        b = init_encoder(EncoderConfig(num_layers=2, dim_in=10, dim_hidden=8,
                                       num_heads=2, dim_ff=16, num_codes=4,
                                       seed=6))
        assert np.max(np.abs(a["in_proj.w"] - b["in_proj.w"])) > 0

    def test_norm_gains_one_biases_zero(self):
        params = init_encoder(CFG)
        npt.assert_array_equal(params["layers.0.ln1.g"], 1.0)
        npt.assert_array_equal(params["layers.0.ln1.b"], 0.0)
        npt.assert_array_equal(params["head.b"], 0.0)

    def test_weight_scale_tracks_fan_in(self):
        cfg = EncoderConfig(num_layers=1, dim_in=400, dim_hidden=256,
                            num_heads=4, dim_ff=64, num_codes=4)
        params = init_encoder(cfg, dtype=np.float64)
        npt.assert_allclose(params["in_proj.w"].std(), 1.0 / np.sqrt(400),
                            rtol=0.05)
        npt.assert_allclose(params["layers.0.attn.wq"].std(),
                            1.0 / np.sqrt(256), rtol=0.05)


class TestConfigValidation:
    def test_heads_must_divide_hidden(self):
        with pytest.raises(ConfigError):
            EncoderConfig(num_layers=1, dim_in=4, dim_hidden=10, num_heads=3,
                          dim_ff=8, num_codes=4)

    def test_layer_bounds(self):
        with pytest.raises(ConfigError):
            EncoderConfig(num_layers=0, dim_in=4, dim_hidden=8, num_heads=2,
                          dim_ff=8, num_codes=4)
        with pytest.raises(ConfigError):
            EncoderConfig(num_layers=65, dim_in=4, dim_hidden=8, num_heads=2,
                          dim_ff=8, num_codes=4)

    def test_codes_minimum(self):
        with pytest.raises(ConfigError):
            EncoderConfig(num_layers=1, dim_in=4, dim_hidden=8, num_heads=2,
                          dim_ff=8, num_codes=1)


class TestForward:
    def test_trace_shapes(self):
        params = init_encoder(CFG, dtype=np.float64)
        x = RNG.standard_normal((10, 7))
        trace = forward(params, x, CFG)
        assert len(trace.layers) == CFG.num_layers
        for z in trace.layers:
            assert z.shape == (8, 7)
        assert trace.logits.shape == (4, 7)
        assert np.all(np.isfinite(trace.logits))

    def test_single_frame(self):
        params = init_encoder(CFG, dtype=np.float64)
        trace = forward(params, RNG.standard_normal((10, 1)), CFG)
        assert trace.logits.shape == (4, 1)
        assert np.all(np.isfinite(trace.logits))

    def test_deterministic(self):
        params = init_encoder(CFG, dtype=np.float64)
        x = RNG.standard_normal((10, 5))
        npt.assert_array_equal(forward(params, x, CFG).logits,
                               forward(params, x, CFG).logits)

    def test_input_sensitivity(self):
        params = init_encoder(CFG, dtype=np.float64)
        x = RNG.standard_normal((10, 5))
        a = forward(params, x, CFG).logits
        b = forward(params, 2.0 * x, CFG).logits
        assert np.max(np.abs(a - b)) > 0

    def test_permutation_equivariance_without_positions(self):
        cfg = EncoderConfig(num_layers=2, dim_in=10, dim_hidden=8,
                            num_heads=2, dim_ff=16, num_codes=4, seed=5,
                            pos_encoding=False)
        params = init_encoder(cfg, dtype=np.float64)
        x = RNG.standard_normal((10, 3))
        perm = np.array([2, 0, 1])
        direct = forward(params, x[:, perm], cfg).logits
        permuted = forward(params, x, cfg).logits[:, perm]
        npt.assert_allclose(direct, permuted, atol=1e-10)

    def test_positions_break_equivariance(self):
        params = init_encoder(CFG, dtype=np.float64)
        x = RNG.standard_normal((10, 3))
        perm = np.array([2, 0, 1])
        direct = forward(params, x[:, perm], CFG).logits
        permuted = forward(params, x, CFG).logits[:, perm]
        assert np.max(np.abs(direct - permuted)) > 1e-3

    def test_batched_graph_matches_sequential(self):
        params = init_encoder(CFG, dtype=np.float64)
        params_t = params_to_tensors(params)
        xs = RNG.standard_normal((3, 6, 10))
        zs_b, logits_b = forward_graph(params_t, Tensor(xs), CFG)
        for i in range(3):
            zs_i, logits_i = forward_graph(params_t, Tensor(xs[i]), CFG)
            npt.assert_allclose(logits_b.data[i], logits_i.data, atol=1e-12)
            npt.assert_allclose(zs_b[-1].data[i], zs_i[-1].data, atol=1e-12)


class TestTap:
    def test_per_frame_moments(self):
        params = init_encoder(CFG, dtype=np.float64)
        trace = forward(params, RNG.standard_normal((10, 9)), CFG)
        for k in (1, 2):
            z = tap(trace, k)
            assert z.shape == (8, 9)
            npt.assert_allclose(z.mean(axis=0), 0.0, atol=1e-6)
            npt.assert_allclose(z.std(axis=0), 1.0, atol=1e-6)

    def test_k_out_of_range(self):
        params = init_encoder(CFG, dtype=np.float64)
        trace = forward(params, RNG.standard_normal((10, 4)), CFG)
        with pytest.raises(ValueError):
            tap(trace, 0)
        with pytest.raises(ValueError):
            tap(trace, 3)

    def test_gradient_reaches_layers_below_tap(self):
        params = init_encoder(CFG, dtype=np.float64)
        params_t = params_to_tensors(params)
        x = RNG.standard_normal((6, 10))
        zs, _ = forward_graph(params_t, Tensor(x), CFG)
        # sum of squares of standardized frames is constant, so probe with
        # a random linear functional instead
        w = Tensor(RNG.standard_normal((6, 8)))
        (tap_graph(zs, 1) * w).sum().backward()
        g = params_t["layers.0.attn.wq"].grad
        assert g is not None and np.max(np.abs(g)) > 1e-12
        # layer above the tap is untouched by this loss
        assert params_t["layers.1.attn.wq"].grad is None


class TestDefaultK:
    def test_published_depths(self):
        assert default_k(5) == 3
        assert default_k(10) == 7

    def test_floor_clamp(self):
        assert default_k(1) == 1

    def test_all_supported_depths_in_range(self):
        for k_layers in range(1, 65):
            k = default_k(k_layers)
            assert 1 <= k <= k_layers
            # never more than one away from the exact fraction
            assert abs(k - 0.7 * k_layers) <= 0.5 + 1e-9
