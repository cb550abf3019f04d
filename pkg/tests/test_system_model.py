import numpy as np
import pytest

from gradcert.errors import CertificationError, ValidationError
from gradcert.iqc_blocks import IqcBlock, sector_iqc
from gradcert.system_model import (
    LtiSystem,
    NonlinearBlock,
    augment,
    is_hurwitz,
    load_plant,
    nominal_controller,
    plant_from_config,
)


class TestIsHurwitz:
    def test_scalar_stable(self):
        assert is_hurwitz(np.array([[-1.0]]))

    def test_double_integrator(self):
        assert not is_hurwitz(np.array([[0.0, 1.0], [0.0, 0.0]]))

    def test_margin(self):
        assert not is_hurwitz(np.array([[-1e-12]]))

    def test_rejects_nonsquare(self):
        with pytest.raises(ValidationError):
            is_hurwitz(np.zeros((2, 3)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValidationError):
            is_hurwitz(np.array([[np.nan]]))

    def test_similarity_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = rng.integers(1, 7)
            A = rng.normal(size=(n, n)) - (rng.uniform(0.5, 2.0) + 0.0) * np.eye(n)
            while True:
                T = rng.normal(size=(n, n))
                if np.linalg.cond(T) < 50:
                    break
            sim = T @ A @ np.linalg.inv(T)
            assert is_hurwitz(A) == is_hurwitz(sim)


class TestLtiSystem:
    def test_default_output_identity(self):
        sys = LtiSystem(np.array([[-1.0]]), np.array([[1.0]]))
        np.testing.assert_array_equal(sys.C, np.eye(1))
        assert (sys.n_s, sys.n_a, sys.n_o) == (1, 1, 1)

    def test_dimension_checks(self):
        with pytest.raises(ValidationError):
            LtiSystem(np.zeros((2, 2)), np.zeros((3, 1)))


class TestNonlinearBlock:
    def test_sine_sector_flight(self):
        blk = NonlinearBlock("sin_minus_id", [0, 1], [1, 0], domain=np.pi / 2)
        lo, hi = blk.slope_sector
        assert lo == pytest.approx(-1.0)
        assert hi == 0.0

    def test_sine_sector_power(self):
        blk = NonlinearBlock("id_minus_sin", [1, -1], [0.5, -0.5], domain=np.pi / 3)
        lo, hi = blk.slope_sector
        assert lo == 0.0
        assert hi == pytest.approx(0.5)  # 1 - cos(pi/3)

    def test_scale_rescales_sector(self):
        blk = NonlinearBlock("id_minus_sin", [1.0], [1.0], domain=np.pi / 3, scale=0.5)
        assert blk.slope_sector[1] == pytest.approx(0.25)

    def test_sampled_difference_quotients_in_sector(self):
        rng = np.random.default_rng(1)
        blk = NonlinearBlock("sin_minus_id", [1.0], [1.0], domain=np.pi / 2)
        lo, hi = blk.slope_sector
        for _ in range(500):
            a, b = rng.uniform(-np.pi / 2, np.pi / 2, size=2)
            if abs(a - b) < 1e-9:
                continue
            quot = (blk.phi(a) - blk.phi(b)) / (a - b)
            assert lo - 1e-12 <= quot <= hi + 1e-12

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValidationError):
            NonlinearBlock("cosine", [1.0], [1.0], domain=1.0)


class TestNominalController:
    def test_scalar_riccati_hand_solve(self):
        plant = LtiSystem(np.array([[0.0]]), np.array([[1.0]]))
        K = nominal_controller(plant, Q=np.eye(1), R=np.eye(1))
        assert K[0, 0] == pytest.approx(-1.0, rel=1e-9)

    def test_given_gain_checked(self):
        plant = LtiSystem(np.array([[0.0]]), np.array([[1.0]]))
        K = nominal_controller(plant, method="given", K=np.array([[-2.0]]))
        np.testing.assert_array_equal(K, [[-2.0]])
        with pytest.raises(CertificationError):
            nominal_controller(plant, method="given", K=np.array([[1.0]]))

    def test_unstabilizable_rejected(self):
        plant = LtiSystem(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0], [0.0]]))
        with pytest.raises(CertificationError):
            nominal_controller(plant)

    def test_lqr_closed_loop_hurwitz_random(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            n = int(rng.integers(1, 5))
            plant = LtiSystem(rng.normal(size=(n, n)), rng.normal(size=(n, 1)))
            try:
                K = nominal_controller(plant)
            except CertificationError:
                continue
            assert is_hurwitz(plant.A + plant.B @ K)


def one_state_filter():
    return IqcBlock(
        a_psi=[[-2.0]], b_psi_y=[[1.0]], b_psi_v=[[0.0]],
        c_psi=[[1.0], [0.0]], d_psi_y=[[0.0], [1.0]], d_psi_v=[[0.5], [0.0]],
        m_pieces=(np.eye(2),),
    )


class TestAugment:
    def test_static_identity_filter_collapses(self):
        plant = LtiSystem(np.array([[-1.0, 0.2], [0.0, -2.0]]), np.array([[1.0], [0.5]]))
        n = plant.n_s
        filt = IqcBlock(
            a_psi=np.zeros((0, 0)), b_psi_y=np.zeros((0, n)), b_psi_v=np.zeros((0, n)),
            c_psi=np.zeros((2 * n, 0)),
            d_psi_y=np.vstack([np.eye(n), np.zeros((n, n))]),
            d_psi_v=np.vstack([np.zeros((n, n)), np.eye(n)]),
            m_pieces=(np.zeros((2 * n, 2 * n)),),
        )
        aug = augment(plant, filt)
        np.testing.assert_array_equal(aug.A_bar, plant.A)
        np.testing.assert_array_equal(aug.C_bar[:n, :n], np.eye(n))
        assert aug.n_psi == 0

    def test_one_state_filter_block_structure(self):
        plant = LtiSystem(np.array([[-1.0, 0.2], [0.0, -2.0]]), np.array([[1.0], [0.5]]))
        filt = one_state_filter().with_channels(np.array([[1.0, 0.0]]), np.array([[0.0], [1.0]]))
        aug = augment(plant, filt)
        assert aug.A_bar.shape == (3, 3)
        np.testing.assert_array_equal(aug.A_bar[:2, 2], np.zeros(2))  # upper-right zero
        np.testing.assert_allclose(aug.A_bar[2, :2], [1.0, 0.0])      # B_psi_y @ S
        assert aug.A_bar[2, 2] == -2.0
        np.testing.assert_array_equal(aug.B_bar_q, np.vstack([plant.B @ np.ones((1, 2)), np.zeros((1, 2))]))

    def test_dimension_mismatch_rejected(self):
        plant = LtiSystem(np.array([[-1.0]]), np.array([[1.0]]))
        filt = one_state_filter().with_channels(np.array([[1.0, 0.0]]), np.array([[0.0], [1.0]]))
        with pytest.raises(ValidationError):
            augment(plant, filt)

    def test_default_identity_maps_require_matching_dims(self):
        plant = LtiSystem(np.array([[-1.0]]), np.array([[1.0]]))
        blk = sector_iqc(0.0, 1.0)  # scalar channel, matches n_s = 1
        aug = augment(plant, blk)
        assert aug.n_v == 1 and aug.n_x == 1


class TestConfig:
    def test_roundtrip(self, tmp_path):
        cfg = {
            "A": [[-1.0, 0.0], [0.0, -2.0]],
            "B": [[1.0], [0.0]],
            "nonlinear_blocks": [
                {"kind": "sin_minus_id", "domain": 1.5707963,
                 "channels": [{"input": [0.0, 1.0], "output": [0.0, 1.0]}]},
            ],
        }
        path = tmp_path / "plant.json"
        import json
        path.write_text(json.dumps(cfg))
        plant, blocks = load_plant(path)
        assert plant.n_s == 2 and len(blocks) == 1
        assert blocks[0].slope_sector[0] == pytest.approx(-1.0, rel=1e-6)

    def test_unknown_keys_fail_closed(self):
        with pytest.raises(ValidationError):
            plant_from_config({"A": [[-1.0]], "B": [[1.0]], "frobnicate": 1})


class TestAugmentedTrajectory:
    def test_filter_states_do_not_feed_back(self):
        # with v = 0 the augmented system's plant rows reproduce the
        # unaugmented trajectory exactly (upper-right block of A_bar is zero)
        from gradcert.iqc_blocks import zames_falb_iqc
        import scipy.linalg as sla
        A = np.array([[-0.5, 0.2], [0.0, -1.5]])
        plant = LtiSystem(A, np.array([[1.0], [0.0]]))
        filt = zames_falb_iqc(-1.0, 0.0, pole=2.0).with_channels(
            np.array([[0.0, 1.0]]), np.array([[0.0], [1.0]]))
        aug = augment(plant, filt)
        x0 = np.array([1.0, -0.5])
        xbar0 = np.concatenate([x0, np.zeros(aug.n_psi)])
        T = 2.0
        full = sla.expm(aug.A_bar * T) @ xbar0
        ref = sla.expm(A * T) @ x0
        np.testing.assert_allclose(full[:2], ref, atol=1e-12)
