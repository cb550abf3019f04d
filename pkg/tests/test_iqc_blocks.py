import math

import numpy as np
import pytest

from gradcert.errors import ValidationError
from gradcert.iqc_blocks import (
    block_from_config,
    combine,
    l2_gain_iqc,
    sector_iqc,
    slope_restricted_stack,
    zames_falb_iqc,
)
from gradcert.system_model import NonlinearBlock


def hard_iqc_trace(block, zeta, w, h):
    """Running integral of z^T M_g z along a sampled channel trajectory."""
    z = block.filter_response(zeta, w, h)
    M = block.M_g
    vals = np.einsum("ti,ij,tj->t", z, M, z)
    c = np.concatenate([[0.0], np.cumsum(0.5 * (vals[1:] + vals[:-1]) * h)])
    return c


def smooth_signal(rng, t, amp=1.0):
    y = np.zeros_like(t)
    for _ in range(rng.integers(1, 6)):
        y += rng.uniform(0.1, 1.0) * np.sin(rng.uniform(0.1, 8.0) * t + rng.uniform(0, 2 * np.pi))
    scale = np.max(np.abs(y))
    return amp * y / scale if scale > 0 else y


class TestSector:
    def test_unit_sector_matrix(self):
        blk = sector_iqc(0.0, 1.0)
        np.testing.assert_array_equal(blk.M_g, [[0.0, 1.0], [1.0, -2.0]])
        assert blk.n_psi == 0

    def test_degenerate_sector(self):
        blk = sector_iqc(0.0, 0.0)
        np.testing.assert_array_equal(blk.M_g, [[0.0, 0.0], [0.0, -2.0]])

    def test_sine_sector(self):
        blk = sector_iqc(-1.0, 0.0)
        np.testing.assert_array_equal(blk.M_g, [[0.0, -1.0], [-1.0, -2.0]])

    def test_order_validated(self):
        with pytest.raises(ValidationError):
            sector_iqc(1.0, 0.0)


class TestL2Gain:
    def test_unit(self):
        blk = l2_gain_iqc(1.0, 1, 1, 1.0)
        np.testing.assert_array_equal(blk.M_g, [[1.0, 0.0], [0.0, -1.0]])

    def test_block_diagonal(self):
        blk = l2_gain_iqc(2.0, 2, 1, 0.5)
        np.testing.assert_allclose(np.diag(blk.M_g), [2.0, 2.0, -0.5])

    def test_bad_multiplier(self):
        with pytest.raises(ValidationError):
            l2_gain_iqc(1.0, 1, 1, 0.0)


class TestZamesFalb:
    def test_infinite_pole_is_sector(self):
        zf = zames_falb_iqc(0.0, 0.5, pole=math.inf)
        sec = sector_iqc(0.0, 0.5)
        np.testing.assert_array_equal(zf.M_g, sec.M_g)
        np.testing.assert_array_equal(zf.d_psi_y, sec.d_psi_y)
        assert zf.n_psi == 0

    def test_power_slope_upper(self):
        theta_bar = np.pi / 3
        blk = zames_falb_iqc(0.0, 1 - np.cos(theta_bar), pole=2.0)
        assert blk.d_psi_y[0, 0] == pytest.approx(0.5)

    def test_bad_pole(self):
        with pytest.raises(ValidationError):
            zames_falb_iqc(0.0, 1.0, pole=-1.0)

    @pytest.mark.parametrize("pole", [0.3, 1.0, 5.0, 20.0])
    def test_hard_iqc_on_flight_sine(self, pole):
        rng = np.random.default_rng(42)
        h, T = 1e-3, 10.0
        t = np.arange(0.0, T, h)
        blk = zames_falb_iqc(-1.0, 0.0, pole=pole)
        for _ in range(10):
            y = smooth_signal(rng, t, amp=rng.uniform(0.2, 1.0) * np.pi / 2)
            w = np.sin(y) - y
            c = hard_iqc_trace(blk, y, w, h)
            assert np.min(c) >= -1e-6 * T

    def test_hard_iqc_on_power_sine(self):
        rng = np.random.default_rng(7)
        h, T = 1e-3, 10.0
        t = np.arange(0.0, T, h)
        blk = zames_falb_iqc(0.0, 0.5, pole=1.0)
        for _ in range(10):
            y = smooth_signal(rng, t, amp=rng.uniform(0.2, 1.0) * np.pi / 3)
            w = y - np.sin(y)
            c = hard_iqc_trace(blk, y, w, h)
            assert np.min(c) >= -1e-6 * T


class TestSectorHardIqc:
    def test_running_integral_nonnegative(self):
        rng = np.random.default_rng(3)
        h, T = 1e-3, 10.0
        t = np.arange(0.0, T, h)
        blk = sector_iqc(-1.0, 0.0)
        for _ in range(10):
            y = smooth_signal(rng, t, amp=np.pi / 2)
            w = np.sin(y) - y
            c = hard_iqc_trace(blk, y, w, h)
            assert np.min(c) >= -1e-6 * T


class TestCombine:
    def test_single_block_identity(self):
        blk = sector_iqc(0.0, 1.0)
        out = combine([blk], [1.0])
        np.testing.assert_array_equal(out.M_g, blk.M_g)
        np.testing.assert_array_equal(out.d_psi_y, blk.d_psi_y)

    def test_disjoint_channels_block_diagonal(self):
        out = combine([sector_iqc(0.0, 1.0), sector_iqc(-1.0, 0.0)], [1.0, 1.0])
        assert out.n_in_y == 2 and out.n_in_v == 2 and out.n_z == 4
        np.testing.assert_array_equal(out.M_g[:2, 2:], np.zeros((2, 2)))

    def test_zero_weight_erases_constraint(self):
        out = combine([sector_iqc(0.0, 1.0), sector_iqc(-1.0, 0.0)], [1.0, 0.0])
        np.testing.assert_array_equal(out.M_g[2:, 2:], np.zeros((2, 2)))

    def test_nonneg_weights_preserve_hard_iqc(self):
        rng = np.random.default_rng(11)
        h, T = 1e-3, 8.0
        t = np.arange(0.0, T, h)
        blk = combine([sector_iqc(-1.0, 0.0), zames_falb_iqc(-1.0, 0.0, pole=1.0)],
                      [0.7, 1.3], share_inputs=True)
        for _ in range(10):
            y = smooth_signal(rng, t, amp=np.pi / 2)
            w = np.sin(y) - y
            c = hard_iqc_trace(blk, y, w, h)
            assert np.min(c) >= -1e-6 * T

    def test_share_inputs_dimension_guard(self):
        with pytest.raises(ValidationError):
            combine([sector_iqc(0.0, 1.0), l2_gain_iqc(1.0, 2, 1)], share_inputs=True)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValidationError):
            combine([sector_iqc(0.0, 1.0)], [-0.5])


class TestSlopeRestrictedStack:
    def test_flight_channel_dimensions(self):
        blocks = [NonlinearBlock("sin_minus_id", np.eye(4)[i], np.eye(4)[(i + 1) % 4],
                                 domain=np.pi / 2) for i in range(3)]
        stack = slope_restricted_stack(blocks, n_s=4, zf_pole=1.0)
        assert stack.n_psi == 3            # one ZF state per channel
        assert stack.n_in_v == 3
        assert stack.selector.shape == (3, 4)
        assert stack.embedding.shape == (4, 3)
        assert len(stack.m_pieces) == 6    # sector + ZF per channel


class TestConfigParsing:
    def test_sector_config(self):
        blk = block_from_config({"kind": "sector", "params": {"alpha": 0.0, "beta": 1.0}})
        np.testing.assert_array_equal(blk.M_g, [[0.0, 1.0], [1.0, -2.0]])

    def test_zf_inf_pole(self):
        blk = block_from_config({"kind": "zames_falb",
                                 "params": {"m_lo": 0.0, "m_hi": 0.5, "pole": "inf"}})
        assert blk.n_psi == 0

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            block_from_config({"kind": "popov", "params": {}})
