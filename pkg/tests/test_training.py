"""Losses, mining, optimizer, and the training loops at toy scale."""

import numpy as np
import pytest

from sampleid.autodiff import Tensor
from sampleid.encoder import EncoderConfig
from sampleid.pairgen import AugRanges
from sampleid.synth import make_toy_dataset
from sampleid.training import (Adam, ClassifierTrainConfig, EncoderTrainConfig,
                               auroc, bce_loss, cosine_lr, gradient_suite,
                               mine_hard_negative_indices, nt_xent_loss,
                               nt_xent_loss_t, train_classifier, train_encoder)
from sampleid.weights import hash_params


class TestNtXent:
    def test_orthogonal_pairs_closed_form(self):
        e = np.eye(4)
        loss, _, _ = nt_xent_loss(np.stack([e[0], e[1]]), np.stack([e[0], e[1]]), 0.05)
        expected = -np.log(np.exp(20.0) / (np.exp(20.0) + 2.0))
        assert loss == pytest.approx(expected, abs=1e-9)

    def test_all_identical_is_log_2b_minus_1(self):
        for b in (2, 3, 5):
            z = np.tile(np.eye(4)[0], (b, 1))
            loss, _, _ = nt_xent_loss(z, z, 0.05)
            assert loss == pytest.approx(np.log(2 * b - 1), abs=1e-9)

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        z_q = Tensor(rng.standard_normal((3, 6)))
        z_r = Tensor(rng.standard_normal((3, 6)))
        from sampleid.autodiff import grad_check
        rep = grad_check(lambda: nt_xent_loss_t(z_q, z_r, 0.1),
                         {"z_q": z_q, "z_r": z_r}, tol=1e-4, max_coords=18)
        assert rep.passed

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        z_q = rng.standard_normal((5, 8))
        z_q /= np.linalg.norm(z_q, axis=1, keepdims=True)
        z_r = rng.standard_normal((5, 8))
        z_r /= np.linalg.norm(z_r, axis=1, keepdims=True)
        base, _, _ = nt_xent_loss(z_q, z_r, 0.2)
        perm = rng.permutation(5)
        permuted, _, _ = nt_xent_loss(z_q[perm], z_r[perm], 0.2)
        assert permuted == pytest.approx(base, abs=1e-12)

    def test_role_swap_symmetry(self):
        rng = np.random.default_rng(2)
        z_q = rng.standard_normal((4, 8))
        z_r = rng.standard_normal((4, 8))
        a, _, _ = nt_xent_loss(z_q, z_r, 0.3)
        b, _, _ = nt_xent_loss(z_r, z_q, 0.3)
        assert a == pytest.approx(b, abs=1e-12)

    def test_batch_of_one_rejected(self):
        z = np.ones((1, 4))
        with pytest.raises(ValueError):
            nt_xent_loss(z, z, 0.1)


class TestBce:
    def test_half_one_is_ln2(self):
        loss, _ = bce_loss(0.5, 1)
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)

    def test_limits_clamp(self):
        loss1, _ = bce_loss(1.0, 1)
        loss0, _ = bce_loss(0.0, 0)
        assert loss1 == pytest.approx(0.0, abs=1e-6)
        assert loss0 == pytest.approx(0.0, abs=1e-6)

    def test_formula_grid(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            p = float(rng.uniform(0.01, 0.99))
            y = int(rng.integers(0, 2))
            loss, grad = bce_loss(p, y)
            expected = -(y * np.log(p) + (1 - y) * np.log(1 - p))
            assert loss == pytest.approx(expected, abs=1e-12)
            h = 1e-7
            numeric = (bce_loss(p + h, y)[0] - bce_loss(p - h, y)[0]) / (2 * h)
            assert grad == pytest.approx(numeric, rel=1e-5)

    def test_bad_label(self):
        with pytest.raises(ValueError):
            bce_loss(0.5, 2)


class TestMining:
    def test_engineered_matrix_top3(self):
        """Brute-force top-3 per row on a designed similarity matrix."""
        z_q = np.eye(4)
        # reference vectors chosen so row i's similarities are i-dependent
        rng = np.random.default_rng(4)
        z_r = rng.standard_normal((4, 4))
        idx = mine_hard_negative_indices(z_q, z_r, 3)
        sims = z_q @ z_r.T
        for i in range(4):
            order = sorted((j for j in range(4) if j != i),
                           key=lambda j: (-sims[i, j], j))
            np.testing.assert_array_equal(idx[i], order[:3])

    def test_equal_similarities_tie_to_lowest(self):
        z_q = np.ones((5, 3))
        z_r = np.ones((5, 3))
        idx = mine_hard_negative_indices(z_q, z_r, 3)
        for i in range(5):
            expected = [j for j in range(5) if j != i][:3]
            np.testing.assert_array_equal(idx[i], expected)

    def test_ratio_contract(self):
        rng = np.random.default_rng(5)
        z = rng.standard_normal((8, 4))
        idx = mine_hard_negative_indices(z, z, 3)
        assert idx.shape == (8, 3)          # |N| = 3 * B_c
        assert all(idx[i, k] != i for i in range(8) for k in range(3))

    def test_too_small_batch(self):
        z = np.ones((3, 2))
        with pytest.raises(ValueError):
            mine_hard_negative_indices(z, z, 3)


class TestOptimizer:
    def test_zero_gradient_no_move(self):
        p = Tensor(np.array([1.0, -2.0]))
        opt = Adam({"p": p}, lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_descends_quadratic(self):
        p = Tensor(np.array([5.0]))
        opt = Adam({"p": p}, lr=0.3)
        for _ in range(200):
            p.grad = 2 * p.data
            opt.step()
        assert abs(p.data[0]) < 1e-2

    def test_cosine_midpoint(self):
        assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)
        assert cosine_lr(0, 100, 1e-3, 1e-5) == pytest.approx(1e-3)
        assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5)


class TestAuroc:
    def test_perfect_and_random(self):
        scores = np.array([0.9, 0.8, 0.2, 0.1])
        labels = np.array([1, 1, 0, 0])
        assert auroc(scores, labels) == pytest.approx(1.0)
        assert auroc(1 - scores, labels) == pytest.approx(0.0)
        assert auroc(np.ones(4), labels) == pytest.approx(0.5)


class TestGradientSuite:
    def test_all_blocks_pass(self):
        reports = gradient_suite(tol=1e-4, seed=0, max_coords=8)
        failures = {k: str(v) for k, v in reports.items() if not v.passed}
        assert not failures, failures


def _tiny_train_cfg(tracks_duration=6.0):
    from sampleid.audio import MelConfig
    return EncoderTrainConfig(
        encoder=EncoderConfig.tiny(),
        mel=MelConfig(n_mels=16, n_frames=8, window_seconds=4.0,
                      hop_seconds=0.5, fft_size=256, stft_hop=8000),
        aug=AugRanges(offset_s=0.1, gain_db=3.0, pitch_semitones=1.0,
                      stretch=(0.9, 1.1)),
        batch_size=4, epochs=3, steps_per_epoch=4,
        lr_max=3e-3, lr_min=1e-4, seed=7,
    )


@pytest.fixture(scope="module")
def tracks():
    return make_toy_dataset(n_tracks=4, duration=6.0)


class TestTrainEncoder:
    def test_loss_decreases_and_deterministic(self, tracks):
        cfg = _tiny_train_cfg()
        params1, hist1 = train_encoder(tracks, cfg)
        assert hist1.train_loss[-1] < hist1.train_loss[0]
        params2, hist2 = train_encoder(tracks, cfg)
        assert hist1.train_loss == hist2.train_loss
        assert hash_params(params1.named()) == hash_params(params2.named())

    def test_needs_two_tracks(self, tracks):
        with pytest.raises(ValueError):
            train_encoder(tracks[:1], _tiny_train_cfg())


class TestTrainClassifier:
    def test_freeze_and_ratio(self, tracks):
        enc_cfg = _tiny_train_cfg()
        enc_params, _ = train_encoder(tracks, enc_cfg)
        before = hash_params(enc_params.named())
        cfg = ClassifierTrainConfig(
            mel=enc_cfg.mel, aug=enc_cfg.aug, batch_size=4, epochs=1,
            steps_per_epoch=2, n_heads=2, seed=11)
        clf, losses = train_classifier(tracks, enc_params, cfg)
        assert hash_params(enc_params.named()) == before
        assert losses and np.isfinite(losses).all()
