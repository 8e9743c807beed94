import numpy as np
import pytest

from dipsvd import (
    CalibrationMatrix,
    ContractViolationError,
    Layer,
    ShapeError,
    ToyModel,
    capture_activations,
    generate_synthetic,
    load_matrix,
    save_matrix,
    seeded_rng,
    svd,
)


class TestSyntheticGenerator:
    def test_flat_spectrum_gives_orthonormal_columns(self):
        c = generate_synthetic(12, 5, np.ones(5), seed=0)
        assert np.abs(c.x.T @ c.x - np.eye(5)).max() < 1e-10

    def test_planted_spectrum(self):
        c = generate_synthetic(8, 3, [5.0, 3.0, 1.0], seed=4)
        sig = svd(c.x).sigma
        assert np.abs(sig - [5.0, 3.0, 1.0]).max() / 5.0 < 1e-9

    def test_same_seed_bit_identical(self):
        a = generate_synthetic(20, 6, np.geomspace(1, 0.1, 6), seed=7)
        b = generate_synthetic(20, 6, np.geomspace(1, 0.1, 6), seed=7)
        assert a.x.tobytes() == b.x.tobytes()

    def test_negative_spectrum_rejected(self):
        with pytest.raises(ContractViolationError):
            generate_synthetic(8, 3, [1.0, -0.5, 0.2], seed=0)

    def test_spectrum_length_must_match(self):
        with pytest.raises(ContractViolationError):
            generate_synthetic(8, 3, [1.0, 0.5], seed=0)

    def test_requires_enough_tokens(self):
        with pytest.raises(ContractViolationError):
            generate_synthetic(2, 3, [1.0, 0.5, 0.2], seed=0)

    def test_noise_is_seeded(self):
        a = generate_synthetic(10, 4, np.ones(4), seed=3, noise=0.1)
        b = generate_synthetic(10, 4, np.ones(4), seed=3, noise=0.1)
        c = generate_synthetic(10, 4, np.ones(4), seed=3)
        assert np.array_equal(a.x, b.x)
        assert not np.array_equal(a.x, c.x)

    def test_gram_rank_recorded(self):
        full = generate_synthetic(10, 4, [4.0, 3.0, 2.0, 1.0], seed=0)
        deficient = generate_synthetic(10, 4, [4.0, 3.0, 0.0, 0.0], seed=0)
        assert full.gram_rank == 4
        assert deficient.gram_rank == 2


def test_save_load_round_trip(tmp_path):
    c = generate_synthetic(10, 7, np.geomspace(1, 0.1, 7), seed=5)
    bin_path = tmp_path / "calib.dsvd"
    save_matrix(c, bin_path)
    loaded = load_matrix(bin_path)
    assert loaded.source == "file"
    assert np.array_equal(loaded.x, c.x)

    csv_path = tmp_path / "calib.csv"
    save_matrix(c.x, csv_path)
    assert np.abs(load_matrix(csv_path).x - c.x).max() < 1e-15


def _single_layer(w, activation="identity"):
    w = np.asarray(w, dtype=float)
    return ToyModel(
        layers=[Layer(weights={"attn": w}, activation=activation)],
        input_dim=w.shape[1],
        hidden_dim=w.shape[0],
    )


def _two_layer(first_scale):
    eye = np.eye(3)
    return ToyModel(
        layers=[
            Layer(weights={"attn": first_scale * eye}, activation="identity"),
            Layer(weights={"attn": eye.copy()}, activation="identity"),
        ],
        input_dim=3,
        hidden_dim=3,
    )


class TestCapture:
    def test_identity_model_sees_input(self):
        model = _single_layer(np.eye(4))
        x = generate_synthetic(9, 4, np.ones(4), seed=1)
        caps = capture_activations(model, x)
        assert len(caps) == 1
        assert np.array_equal(caps[0].x, x.x)
        assert caps[0].source == "captured"

    def test_scaled_first_weight_scales_downstream_capture(self):
        x = generate_synthetic(8, 3, np.ones(3), seed=2)
        base = capture_activations(_two_layer(1.0), x)
        scaled = capture_activations(_two_layer(2.0), x)
        assert np.abs(scaled[1].x - 2.0 * base[1].x).max() < 1e-14

    def test_zero_input_zero_captures(self):
        model = _single_layer(seeded_rng(0).standard_normal((4, 4)), "tanh")
        zero = CalibrationMatrix(
            x=np.zeros((5, 4)) + 0.0, source="file", gram_rank=0
        )
        caps = capture_activations(model, zero)
        assert all(np.all(c.x == 0.0) for c in caps)

    def test_capture_is_non_destructive(self):
        model = _single_layer(seeded_rng(3).standard_normal((5, 4)), "tanh")
        x = generate_synthetic(12, 4, np.ones(4), seed=3)
        before, _ = model.forward(x.x)
        capture_activations(model, x)
        after, _ = model.forward(x.x)
        assert np.array_equal(before, after)

    def test_one_capture_per_weight(self):
        from dipsvd import random_model

        model = random_model(3, 6, 8, seed=0)
        x = generate_synthetic(10, 6, np.ones(6), seed=0)
        caps = capture_activations(model, x)
        assert len(caps) == model.weight_count() == 6

    def test_dimension_mismatch_names_layer(self):
        model = _single_layer(np.eye(4))
        x = generate_synthetic(9, 5, np.ones(5), seed=1)
        with pytest.raises(ShapeError, match="layer 0"):
            capture_activations(model, x)


def test_bad_source_tag_rejected():
    with pytest.raises(ContractViolationError):
        CalibrationMatrix(x=np.ones((2, 2)), source="quilt")
