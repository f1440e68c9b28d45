"""Network forward components: squash, projection, capsule geometry, decoder."""

import numpy as np
import pytest

from capsroute.errors import ConfigError
from capsroute.model import (
    CapsNetParams,
    ModelArch,
    digit_caps,
    forward,
    init_params,
    preset_arch,
    primary_capsules,
    project,
    reconstruct,
    squash,
)
from capsroute.rng import substream


class TestSquash:
    def test_zero_maps_to_zero(self):
        np.testing.assert_array_equal(squash(np.zeros(4)), np.zeros(4))

    def test_unit_vector(self):
        np.testing.assert_allclose(squash(np.array([1.0, 0.0])), [0.5, 0.0], atol=1e-15)

    def test_norm_three(self):
        np.testing.assert_allclose(squash(np.array([3.0, 0.0])), [0.9, 0.0], atol=1e-15)

    def test_length_law_across_ten_decades(self):
        rng = np.random.default_rng(0)
        dirs = rng.standard_normal((1000, 5))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        norms = 10.0 ** rng.uniform(-8, 3, size=(1000, 1))
        v = dirs * norms
        out = squash(v)
        lengths = np.linalg.norm(out, axis=1)
        assert (lengths < 1.0).all()
        expected = norms[:, 0] ** 2 / (1.0 + norms[:, 0] ** 2)
        np.testing.assert_allclose(lengths, expected, rtol=1e-12, atol=1e-12)

    def test_direction_preserved(self):
        rng = np.random.default_rng(1)
        v = rng.standard_normal((500, 4)) * 10.0 ** rng.uniform(-6, 2, size=(500, 1))
        out = squash(v)
        dots = np.sum(out * v, axis=1)
        assert (dots >= 0).all()
        mask = np.linalg.norm(v, axis=1) > 1e-6
        cross = out[mask] * np.roll(v[mask], 1, axis=1) - np.roll(out[mask], 1, axis=1) * v[mask]
        scale = np.linalg.norm(v[mask], axis=1, keepdims=True)
        assert np.abs(cross / scale).max() < 1e-10


class TestProject:
    def test_identity_projection(self):
        rng = np.random.default_rng(0)
        u = rng.standard_normal((2, 3, 4))
        W = np.broadcast_to(np.eye(4), (3, 5, 4, 4)).copy()
        u_hat = project(u, W)
        for j in range(5):
            np.testing.assert_array_equal(u_hat[:, :, j, :], u)

    def test_zero_projection(self):
        u = np.ones((2, 3, 4))
        assert not project(u, np.zeros((3, 5, 6, 4))).any()

    def test_matches_per_pair_matmul(self):
        rng = np.random.default_rng(2)
        u = rng.standard_normal((2, 3, 4))
        W = rng.standard_normal((3, 5, 6, 4))
        u_hat = project(u, W)
        for k in range(2):
            for i in range(3):
                for j in range(5):
                    np.testing.assert_allclose(u_hat[k, i, j], W[i, j] @ u[k, i], atol=1e-10)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        u1, u2 = rng.standard_normal((2, 2, 3, 4))
        W = rng.standard_normal((3, 5, 6, 4))
        lhs = project(2.5 * u1 - 0.5 * u2, W)
        rhs = 2.5 * project(u1, W) - 0.5 * project(u2, W)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestPrimaryCapsules:
    def test_full_scale_capsule_count(self):
        arch = preset_arch("mnist")
        assert arch.conv1_hw == (20, 20)
        assert arch.grid_hw == (6, 6)
        assert arch.num_primary == 1152

    def test_reduced_capsule_count(self):
        arch = preset_arch("mnist", conv1_filters=32, primary_types=8)
        assert arch.num_primary == 288

    def test_capsule_norms_below_one(self):
        arch = preset_arch("mnist", conv1_filters=8, primary_types=2, recon_hidden=None)
        params = init_params(arch, substream(0, "params"))
        x = substream(1, "imgs").random((3, 1, 28, 28))
        trace = primary_capsules(params, arch, x)
        assert trace.u.shape == (3, arch.num_primary, 8)
        assert (np.linalg.norm(trace.u, axis=-1) < 1.0).all()


class TestDigitCaps:
    def test_single_capsule_unit_coefficient(self):
        rng = np.random.default_rng(0)
        u_hat = rng.standard_normal((2, 1, 1, 4))
        v, s, lengths = digit_caps(u_hat, np.ones((1, 1)))
        np.testing.assert_array_equal(v, u_hat[:, 0])
        np.testing.assert_allclose(s, squash(u_hat[:, 0]), atol=1e-15)

    def test_zero_coefficients_give_zero_output(self):
        u_hat = np.random.default_rng(1).standard_normal((2, 4, 3, 5))
        v, s, lengths = digit_caps(u_hat, np.zeros((4, 3)))
        assert not s.any() and not lengths.any()

    def test_scalar_capsule_hand_case(self):
        u_hat = np.array([1.0, 2.0]).reshape(1, 2, 1, 1)
        v, s, lengths = digit_caps(u_hat, np.ones((2, 1)))
        np.testing.assert_allclose(v, [[[3.0]]])
        np.testing.assert_allclose(s, [[[0.9]]], atol=1e-15)


class TestReconstruct:
    def _setup(self):
        arch = ModelArch(in_channels=1, image_h=28, image_w=28, conv1_filters=8,
                         primary_types=2, recon_hidden=(16, 20))
        params = init_params(arch, substream(0, "params"))
        return arch, params

    def test_zero_weights_give_half(self):
        arch, params = self._setup()
        params.recon = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.recon]
        s = substream(1, "s").standard_normal((3, 10, 16))
        out, _ = reconstruct(params, arch, s, np.array([1, 2, 3]))
        np.testing.assert_array_equal(out, np.full((3, 784), 0.5))

    def test_output_shape_and_range(self):
        arch, params = self._setup()
        s = substream(2, "s").standard_normal((4, 10, 16))
        out, _ = reconstruct(params, arch, s, np.array([0, 1, 2, 3]))
        assert out.shape == (4, 784)
        assert (out > 0).all() and (out < 1).all()

    def test_mask_selects_target_capsule(self):
        arch, params = self._setup()
        s = substream(3, "s").standard_normal((1, 10, 16))
        out_a, cache_a = reconstruct(params, arch, s, np.array([2]))
        out_b, cache_b = reconstruct(params, arch, s, np.array([7]))
        assert not np.array_equal(cache_a["flat"], cache_b["flat"])
        assert not np.array_equal(out_a, out_b)

    def test_missing_decoder_is_config_error(self):
        arch, params = self._setup()
        params.recon = None
        with pytest.raises(ConfigError, match="x/FC"):
            reconstruct(params, arch, np.zeros((1, 10, 16)), np.array([0]))


class TestForward:
    def test_full_scale_lengths_shape_and_range(self):
        arch = preset_arch("mnist")
        params = init_params(arch, substream(0, "params"))
        coeffs = substream(1, "b").standard_normal((arch.num_primary, 10)) / arch.num_primary
        x = substream(2, "x").random((2, 1, 28, 28))
        trace = forward(params, arch, x, coeffs, mode="l2")
        assert trace.lengths.shape == (2, 10)
        assert (trace.lengths >= 0).all() and (trace.lengths < 1).all()

    def test_dynamic_mode_records_coupling(self):
        arch = preset_arch("mnist", conv1_filters=8, primary_types=2, recon_hidden=None)
        params = init_params(arch, substream(0, "params"))
        x = substream(1, "x").random((2, 1, 28, 28))
        trace = forward(params, arch, x, mode="dynamic", dynamic_iters=2)
        assert trace.coupling.shape == (2, arch.num_primary, 10)
        np.testing.assert_allclose(trace.coupling.sum(axis=2), 1.0, atol=1e-6)
