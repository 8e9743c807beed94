import numpy as np
import pytest

from dipsvd import (
    ContractViolationError,
    Layer,
    ShapeError,
    ToyModel,
    UndefinedSimilarityError,
    cosine_output_similarity,
    generate_synthetic,
    gradients,
    load_model,
    random_model,
    save_model,
    scalar_loss,
    seeded_rng,
    spectral_model,
)

from oracles import finite_difference_gradients, gradcheck_max_rel_err


def _single(w, activation="identity"):
    w = np.asarray(w, dtype=float)
    return ToyModel(
        layers=[Layer(weights={"attn": w}, activation=activation)],
        input_dim=w.shape[1],
        hidden_dim=w.shape[0],
    )


class TestForward:
    def test_identity_model(self):
        model = ToyModel(
            layers=[
                Layer(weights={"attn": np.eye(3), "mlp": np.eye(3)}, activation="identity")
            ],
            input_dim=3,
            hidden_dim=3,
        )
        x = seeded_rng(0).standard_normal((5, 3))
        out, hiddens = model.forward(x)
        assert np.array_equal(out, x)
        assert len(hiddens) == 1

    def test_hand_evaluated_tanh(self):
        w = np.array([[1.0, 2.0], [0.5, -1.0]])
        model = _single(w, "tanh")
        x = np.array([[0.3, -0.2]])
        out, _ = model.forward(x)
        assert np.allclose(out, np.tanh(x @ w.T), atol=1e-15)

    def test_hidden_state_count(self):
        model = random_model(4, 5, 6, seed=1)
        _, hiddens = model.forward(np.ones((2, 5)))
        assert len(hiddens) == 4

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            _single(np.eye(3)).forward(np.ones((2, 4)))


class TestScalarLoss:
    def test_zero_at_target(self):
        model = random_model(2, 4, 4, seed=0)
        x = seeded_rng(1).standard_normal((6, 4))
        out, _ = model.forward(x)
        assert scalar_loss(model, x, out) == 0.0

    def test_unit_residual(self):
        model = _single(np.eye(3))
        x = np.zeros((4, 3)) + 0.0
        x[0, 0] = 0.0
        target = np.ones((4, 3))
        # output is zero, so every residual entry is 1
        assert scalar_loss(model, np.zeros((4, 3)), target) == pytest.approx(1.0)

    def test_matches_recomputation(self):
        model = random_model(3, 5, 5, seed=2)
        x = seeded_rng(3).standard_normal((7, 5))
        target = seeded_rng(4).standard_normal((7, 5))
        out, _ = model.forward(x)
        expected = float(np.mean((out - target) ** 2))
        assert scalar_loss(model, x, target) == pytest.approx(expected, rel=1e-12)


class TestGradients:
    def test_zero_at_stationary_point(self):
        model = random_model(2, 4, 4, activation="identity", seed=5)
        x = seeded_rng(6).standard_normal((8, 4))
        out, _ = model.forward(x)
        grads = gradients(model, x, out)
        for layer in grads:
            for g in layer.values():
                assert np.abs(g).max() <= 1e-12

    def test_single_linear_layer_closed_form(self):
        w = seeded_rng(7).standard_normal((4, 3))
        model = _single(w)
        x = seeded_rng(8).standard_normal((10, 3))
        t = seeded_rng(9).standard_normal((10, 4))
        grads = gradients(model, x, t)
        out = x @ w.T
        expected = 2.0 / out.size * (out - t).T @ x
        rel = np.abs(grads[0]["attn"] - expected).max() / np.abs(expected).max()
        assert rel < 1e-10

    @pytest.mark.parametrize("activation", ["tanh", "identity"])
    def test_finite_difference_small_model(self, activation):
        model = random_model(2, 4, 5, activation=activation, seed=10)
        x = seeded_rng(11).standard_normal((6, 4))
        out, _ = model.forward(x)
        target = out + seeded_rng(12).standard_normal(out.shape)
        analytic = gradients(model, x, target)
        numeric = finite_difference_gradients(model, x, target)
        assert gradcheck_max_rel_err(analytic, numeric) < 1e-4


class TestCosine:
    def test_self_similarity(self):
        model = random_model(2, 4, 4, seed=13)
        x = seeded_rng(14).standard_normal((5, 4))
        assert cosine_output_similarity(model, model, x) == 1.0

    def test_scale_invariance(self):
        w = seeded_rng(15).standard_normal((3, 3))
        a = _single(w)
        b = _single(3.0 * w)
        x = seeded_rng(16).standard_normal((6, 3))
        assert cosine_output_similarity(a, b, x) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_outputs(self):
        a = _single(np.array([[1.0, 0.0], [0.0, 0.0]]))
        b = _single(np.array([[0.0, 0.0], [0.0, 1.0]]))
        x = np.array([[1.0, 1.0], [2.0, -1.0]])
        assert abs(cosine_output_similarity(a, b, x)) < 1e-12

    def test_zero_norm_rejected(self):
        a = _single(np.zeros((2, 2)))
        b = _single(np.eye(2))
        with pytest.raises(UndefinedSimilarityError):
            cosine_output_similarity(a, b, np.ones((3, 2)))


class TestCaptureHookConsistency:
    def test_capture_times_weight_equals_preactivation(self):
        # with identity activations the hidden state IS the preactivation
        model = random_model(2, 4, 4, activation="identity", seed=17)
        x = generate_synthetic(9, 4, np.ones(4), seed=18)
        out, hiddens, captured = model.forward_capture(x.x)
        names = [(li, name) for li, name, _ in model.iter_weights()]
        for j, (li, name) in enumerate(names):
            w = model.layers[li].weights[name]
            produced = captured[j].copy() @ w.T
            if j + 1 < len(captured):
                nxt = captured[j + 1]
            else:
                nxt = out
            rel = np.abs(produced - nxt).max() / max(np.abs(nxt).max(), 1e-300)
            assert rel < 1e-12


class TestConstructionAndPersistence:
    def test_dimension_chain_validated(self):
        with pytest.raises(ShapeError):
            ToyModel(
                layers=[Layer(weights={"attn": np.ones((4, 3))}, activation="tanh"),
                        Layer(weights={"attn": np.ones((4, 5))}, activation="tanh")],
                input_dim=3,
                hidden_dim=4,
            )

    def test_needs_layers(self):
        with pytest.raises(ContractViolationError):
            ToyModel(layers=[], input_dim=3, hidden_dim=3)

    def test_unknown_activation(self):
        with pytest.raises(ContractViolationError):
            Layer(weights={"attn": np.eye(2)}, activation="relu6")

    def test_random_model_deterministic(self):
        a = random_model(3, 5, 7, seed=3)
        b = random_model(3, 5, 7, seed=3)
        for (_, _, wa), (_, _, wb) in zip(a.iter_weights(), b.iter_weights()):
            assert np.array_equal(wa, wb)

    def test_spectral_model_deterministic_and_chained(self):
        a = spectral_model(4, 6, 8, seed=5)
        b = spectral_model(4, 6, 8, seed=5)
        assert a.weight_count() == 8
        for (_, _, wa), (_, _, wb) in zip(a.iter_weights(), b.iter_weights()):
            assert np.array_equal(wa, wb)

    def test_save_load_round_trip(self, tmp_path):
        model = random_model(3, 4, 6, seed=19)
        save_model(model, tmp_path / "model")
        loaded = load_model(tmp_path / "model")
        assert loaded.input_dim == model.input_dim
        assert loaded.hidden_dim == model.hidden_dim
        x = seeded_rng(20).standard_normal((5, 4))
        assert np.array_equal(model.forward(x)[0], loaded.forward(x)[0])
        # chain order of weights survives the manifest
        assert [n for _, n, _ in loaded.iter_weights()] == [
            n for _, n, _ in model.iter_weights()
        ]
