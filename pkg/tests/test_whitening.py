import numpy as np
import pytest

from dipsvd import (
    ContractViolationError,
    SingularWhiteningError,
    build_scaling,
    build_whitening,
    channel_importance,
    generate_synthetic,
    identity_scaling,
    identity_whitening,
    seeded_rng,
)
from dipsvd.whitening import default_damping, top_count


class TestChannelImportance:
    def test_orthonormal_columns(self):
        assert np.allclose(channel_importance(np.eye(3)), [1.0, 1.0, 1.0])

    def test_hand_diagonal(self):
        # alpha_j = sqrt(x_j^T (X X^T) x_j) for X = diag(2, 1): [4, 1]
        assert np.allclose(channel_importance(np.diag([2.0, 1.0])), [4.0, 1.0])

    def test_matches_brute_force_sample_gram(self):
        x = seeded_rng(0).standard_normal((20, 6))
        sample_gram = x @ x.T
        expected = np.array(
            [np.sqrt(x[:, j] @ sample_gram @ x[:, j]) for j in range(6)]
        )
        got = channel_importance(x)
        assert np.abs(got - expected).max() / expected.max() < 1e-10

    def test_ordering_invariant_under_global_rescale(self):
        x = seeded_rng(1).standard_normal((15, 5))
        a = channel_importance(x)
        b = channel_importance(3.7 * x)
        assert np.array_equal(np.argsort(a), np.argsort(b))


class TestBuildScaling:
    def test_three_percent_of_hundred_amplifies_three(self):
        alpha = seeded_rng(2).random(100)
        sc = build_scaling(alpha, 30.0, 0.03)
        assert sc.amplified_count == 3
        assert set(np.unique(sc.d_diag)) == {1.0, 30.0}

    def test_zero_fraction_identity(self):
        sc = build_scaling(np.ones(10), 5.0, 0.0)
        assert np.array_equal(sc.d_diag, np.ones(10))

    def test_tie_break_by_lower_index(self):
        sc = build_scaling([5.0, 5.0, 1.0], 2.0, 0.34)
        assert np.array_equal(sc.d_diag, [2.0, 2.0, 1.0])

    def test_amplify_below_one_rejected(self):
        with pytest.raises(ContractViolationError):
            build_scaling(np.ones(4), 0.5, 0.1)

    def test_fraction_out_of_range_rejected(self):
        with pytest.raises(ContractViolationError):
            build_scaling(np.ones(4), 2.0, 1.5)

    def test_positive_fraction_amplifies_at_least_one(self):
        sc = build_scaling(np.ones(3), 2.0, 1e-9)
        assert sc.amplified_count == 1

    def test_idempotent(self):
        alpha = seeded_rng(3).random(12)
        a = build_scaling(alpha, 4.0, 0.25)
        b = build_scaling(alpha, 4.0, 0.25)
        assert np.array_equal(a.d_diag, b.d_diag)

    def test_top_count_float_guard(self):
        assert top_count(0.03, 100) == 3
        assert top_count(0.34, 3) == 2
        assert top_count(0.0, 7) == 0
        assert top_count(1.0, 7) == 7


class TestBuildWhitening:
    def test_already_white(self):
        c = generate_synthetic(12, 4, np.ones(4), seed=0)
        wt = build_whitening(c, None, 0.0)
        assert np.abs(wt.s - np.eye(4)).max() < 1e-8
        assert np.abs(wt.s_inv - np.eye(4)).max() < 1e-8

    def test_hand_square_root(self):
        # X with channel Gram diag(4, 1) whitens through diag(2, 1)
        rng = seeded_rng(4)
        q, _ = np.linalg.qr(rng.standard_normal((10, 2)))
        x = q * np.array([2.0, 1.0])
        wt = build_whitening(x, None, 0.0)
        assert np.abs(wt.s - np.diag([2.0, 1.0])).max() < 1e-10

    @pytest.mark.parametrize("seed", range(4))
    def test_gram_reconstruction_with_random_scaling(self, seed):
        rng = seeded_rng(seed + 10)
        c = generate_synthetic(30, 8, np.geomspace(1, 0.2, 8), seed=seed)
        alpha = channel_importance(c)
        sc = build_scaling(alpha, float(rng.uniform(1.5, 20.0)), 0.25)
        wt = build_whitening(c, sc, 0.0)
        xd = c.x * sc.d_diag
        gram = xd.T @ xd
        rel = np.linalg.norm(wt.s @ wt.s.T - gram) / np.linalg.norm(gram)
        assert rel < 1e-8
        assert np.abs(wt.s @ wt.s_inv - np.eye(8)).max() < 1e-8

    def test_whitening_property(self):
        # the engine of the loss identity: s_inv G s_inv.T == I at zero damping
        c = generate_synthetic(40, 10, np.geomspace(1, 0.1, 10), seed=3)
        sc = build_scaling(channel_importance(c), 30.0, 0.1)
        wt = build_whitening(c, sc, 0.0)
        xd = c.x * sc.d_diag
        white = wt.s_inv @ (xd.T @ xd) @ wt.s_inv.T
        assert np.abs(white - np.eye(10)).max() < 1e-7

    def test_amplification_strictly_scales_gram_diagonal(self):
        c = generate_synthetic(25, 6, np.geomspace(1, 0.3, 6), seed=5)
        sc = build_scaling(channel_importance(c), 7.0, 0.34)
        gram0 = c.x.T @ c.x
        xd = c.x * sc.d_diag
        gram1 = xd.T @ xd
        amplified = sc.d_diag == 7.0
        assert np.allclose(
            np.diag(gram1)[amplified], 49.0 * np.diag(gram0)[amplified], rtol=1e-12
        )
        assert np.allclose(
            np.diag(gram1)[~amplified], np.diag(gram0)[~amplified], rtol=1e-12
        )

    def test_singular_gram_rejected_with_advice(self):
        c = generate_synthetic(12, 4, [1.0, 1.0, 0.0, 0.0], seed=6)
        with pytest.raises(SingularWhiteningError, match="damping"):
            build_whitening(c, None, 0.0)

    def test_default_damping_rescues_rank_deficient_gram(self):
        c = generate_synthetic(12, 4, [1.0, 1.0, 0.0, 0.0], seed=6)
        wt = build_whitening(c)  # auto damping
        assert wt.damping > 0.0
        assert np.abs(wt.s @ wt.s_inv - np.eye(4)).max() < 1e-6

    def test_negative_damping_rejected(self):
        c = generate_synthetic(12, 4, np.ones(4), seed=0)
        with pytest.raises(ContractViolationError):
            build_whitening(c, None, -1.0)

    def test_damped_gram_identity(self):
        c = generate_synthetic(20, 5, np.geomspace(1, 0.1, 5), seed=7)
        lam = 0.05
        wt = build_whitening(c, None, lam)
        gram = c.x.T @ c.x + lam * np.eye(5)
        rel = np.linalg.norm(wt.s @ wt.s.T - gram) / np.linalg.norm(gram)
        assert rel < 1e-8


def test_identity_whitening():
    wt = identity_whitening(5)
    assert np.array_equal(wt.s, np.eye(5))
    assert np.array_equal(wt.s_inv, np.eye(5))
    assert wt.scaling.amplified_count == 0


def test_default_damping_scale():
    gram = np.diag([4.0, 2.0])
    assert default_damping(gram) == pytest.approx(1e-6 * 3.0)


def test_identity_scaling():
    sc = identity_scaling(4)
    assert np.array_equal(sc.d_diag, np.ones(4))
    assert sc.amplified_count == 0
