"""Small stacks of linear layers standing in for a large layered model.

Each layer chains its named weights (two by default, ``attn`` then ``mlp``)
and applies an elementwise nonlinearity. Activations are row-major:
rows are tokens, columns are channels, and a weight ``w`` of shape
(d_out, d_in) maps ``h -> h @ w.T``.

Models are immutable after construction; ``forward`` and ``gradients`` are
pure functions, safe for concurrent read-only use.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, ShapeError, UndefinedSimilarityError
from .linalg import as_matrix, seeded_rng
from . import matio

__all__ = [
    "Layer",
    "ToyModel",
    "random_model",
    "spectral_model",
    "model_from_spec",
    "load_model_spec",
    "save_model",
    "load_model",
    "forward",
    "scalar_loss",
    "gradients",
    "cosine_output_similarity",
]

ACTIVATIONS = ("tanh", "identity")
DEFAULT_WEIGHT_NAMES = ("attn", "mlp")


def _activate(tag, u):
    if tag == "tanh":
        return np.tanh(u)
    if tag == "identity":
        return u
    raise ContractViolationError(f"unknown activation tag {tag!r}")


def _activate_deriv(tag, post):
    # Derivative expressed through the post-activation value.
    if tag == "tanh":
        return 1.0 - post * post
    if tag == "identity":
        return np.ones_like(post)
    raise ContractViolationError(f"unknown activation tag {tag!r}")


@dataclass(frozen=True)
class Layer:
    """Named weights applied in insertion order, then one nonlinearity."""

    weights: dict
    activation: str = "tanh"

    def __post_init__(self):
        if not self.weights:
            raise ContractViolationError("layer needs at least one weight")
        if self.activation not in ACTIVATIONS:
            raise ContractViolationError(
                f"activation must be one of {ACTIVATIONS}, got {self.activation!r}"
            )
        checked = {name: as_matrix(w, name=f"weight {name!r}") for name, w in self.weights.items()}
        object.__setattr__(self, "weights", checked)


@dataclass(frozen=True)
class ToyModel:
    layers: list
    input_dim: int
    hidden_dim: int

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ContractViolationError("model needs at least one layer")
        prev = self.input_dim
        for li, layer in enumerate(self.layers):
            for name, w in layer.weights.items():
                if w.shape[1] != prev:
                    raise ShapeError(
                        f"layer {li} weight {name!r} expects input dim {w.shape[1]}, "
                        f"chain provides {prev}"
                    )
                prev = w.shape[0]
        if prev != self.hidden_dim:
            raise ShapeError(
                f"final layer emits dim {prev}, hidden_dim says {self.hidden_dim}"
            )

    def iter_weights(self):
        """Yield (layer_index, name, array) in forward order."""
        for li, layer in enumerate(self.layers):
            for name, w in layer.weights.items():
                yield li, name, w

    def weight_count(self):
        return sum(1 for _ in self.iter_weights())

    def parameter_count(self):
        return sum(w.size for _, _, w in self.iter_weights())

    def forward(self, x):
        out, hiddens, _, _ = self._forward_trace(x)
        return out, hiddens

    def forward_capture(self, x):
        """Forward pass plus the exact input each weight saw."""
        out, hiddens, captured, _ = self._forward_trace(x)
        return out, hiddens, captured

    def _forward_trace(self, x):
        h = as_matrix(x, name="input")
        if h.shape[1] != self.input_dim:
            raise ShapeError(
                f"layer 0 expects {self.input_dim} input channels, got {h.shape[1]}"
            )
        hiddens = []
        captured = []
        trace = []
        for layer in self.layers:
            inputs = []
            t = h
            for name, w in layer.weights.items():
                inputs.append(t)
                captured.append(t)
                t = t @ w.T
            post = _activate(layer.activation, t)
            trace.append((inputs, post))
            hiddens.append(post)
            h = post
        return h, hiddens, captured, trace


def forward(model, x):
    """Run the model: returns (output, per-layer post-activation states)."""
    return model.forward(x)


def scalar_loss(model, x, target):
    """Mean squared error between the forward output and ``target``."""
    out, _ = model.forward(x)
    tgt = as_matrix(target, name="target")
    if tgt.shape != out.shape:
        raise ShapeError(f"target shape {tgt.shape} != output shape {out.shape}")
    diff = out - tgt
    return float(np.mean(diff * diff))


def gradients(model, x, target):
    """Analytic gradients of :func:`scalar_loss` for every weight.

    Returns a list (one dict per layer) mirroring ``model.layers``, each dict
    mapping weight name to an array of the weight's shape.
    """
    out, _, _, trace = model._forward_trace(x)
    tgt = as_matrix(target, name="target")
    if tgt.shape != out.shape:
        raise ShapeError(f"target shape {tgt.shape} != output shape {out.shape}")
    g = 2.0 * (out - tgt) / out.size
    grads = [dict() for _ in model.layers]
    for li in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[li]
        inputs, post = trace[li]
        g = g * _activate_deriv(layer.activation, post)
        names = list(layer.weights.keys())
        for wi in range(len(names) - 1, -1, -1):
            name = names[wi]
            w = layer.weights[name]
            grads[li][name] = g.T @ inputs[wi]
            g = g @ w
    return grads


def cosine_output_similarity(model_a, model_b, x):
    """Cosine similarity of the two models' flattened outputs on ``x``."""
    a = model_a.forward(x)[0].ravel()
    b = model_b.forward(x)[0].ravel()
    if a.shape != b.shape:
        raise ShapeError(f"output sizes differ: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("zero-norm output")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def random_model(layer_count, input_dim, hidden_dim, activation="tanh", seed=0,
                 weight_scales=None, weight_names=DEFAULT_WEIGHT_NAMES):
    """Build a seeded random model.

    ``weight_scales`` optionally gives one multiplier per layer; weights are
    drawn N(0, 1/d_in) so tanh stays in its responsive range.
    """
    rng = seeded_rng(seed)
    if weight_scales is None:
        weight_scales = [1.0] * layer_count
    if len(weight_scales) != layer_count:
        raise ContractViolationError("weight_scales length must equal layer_count")
    layers = []
    prev = input_dim
    for li in range(layer_count):
        weights = {}
        for name in weight_names:
            w = rng.standard_normal((hidden_dim, prev)) / np.sqrt(prev)
            weights[name] = w * float(weight_scales[li])
            prev = hidden_dim
        layers.append(Layer(weights=weights, activation=activation))
    return ToyModel(layers=layers, input_dim=input_dim, hidden_dim=hidden_dim)


def spectral_model(layer_count, input_dim, hidden_dim, seed=0, activation="tanh",
                   decay_floor=0.05, scale_range=(1.0, 1.8),
                   weight_names=DEFAULT_WEIGHT_NAMES):
    """Seeded model whose weights carry planted singular spectra.

    Every weight's singular values decay geometrically to ``decay_floor``
    and each layer draws a gain from ``scale_range`` (log-uniform), so
    layers differ in both spectral room and saturation. This is the
    heterogeneous family used by the allocator comparisons: depth and gain
    give layers genuinely different compressibility.
    """
    rng = seeded_rng(seed)
    lo, hi = scale_range
    gains = 10.0 ** rng.uniform(np.log10(lo), np.log10(hi), layer_count)
    layers = []
    prev = input_dim
    for li in range(layer_count):
        weights = {}
        for name in weight_names:
            d_out, d_in = hidden_dim, prev
            q1, _ = np.linalg.qr(rng.standard_normal((d_out, d_in)))
            q2, _ = np.linalg.qr(rng.standard_normal((d_in, d_in)))
            r = min(d_out, d_in)
            spec = np.geomspace(1.0, decay_floor, r)
            w = (q1[:, :r] * spec) @ q2[:r, :].T
            # scale so unit-RMS inputs give preactivation RMS ~ gain
            weights[name] = w * (gains[li] * np.sqrt(r) / np.linalg.norm(spec))
            prev = d_out
        layers.append(Layer(weights=weights, activation=activation))
    return ToyModel(layers=layers, input_dim=input_dim, hidden_dim=hidden_dim)


def model_from_spec(spec):
    """Build a model from a config dict: layer count, dims, activation, seed."""
    try:
        layer_count = int(spec["layers"])
        input_dim = int(spec["input_dim"])
        hidden_dim = int(spec["hidden_dim"])
    except KeyError as exc:
        raise ContractViolationError(f"model spec missing key {exc}") from None
    activation = spec.get("activation", "tanh")
    seed = int(spec.get("seed", 0))
    scales = spec.get("weight_scales")
    return random_model(layer_count, input_dim, hidden_dim,
                        activation=activation, seed=seed, weight_scales=scales)


def load_model_spec(path):
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_spec(json.load(fh))


def save_model(model, directory):
    """Persist weights as DSVD files plus a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "input_dim": model.input_dim,
        "hidden_dim": model.hidden_dim,
        "layers": [],
    }
    for li, layer in enumerate(model.layers):
        # weights stored as ordered [name, file] pairs: chain order matters
        entry = {"activation": layer.activation, "weights": []}
        for name, w in layer.weights.items():
            fname = f"layer{li}_{name}.dsvd"
            matio.save_dsvd(w, os.path.join(directory, fname))
            entry["weights"].append([name, fname])
        manifest["layers"].append(entry)
    matio.atomic_write_text(
        os.path.join(directory, "model.json"),
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
    )


def load_model(directory):
    with open(os.path.join(directory, "model.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    layers = []
    for entry in manifest["layers"]:
        weights = {
            name: matio.load_dsvd(os.path.join(directory, fname))
            for name, fname in entry["weights"]
        }
        layers.append(Layer(weights=weights, activation=entry["activation"]))
    return ToyModel(
        layers=layers,
        input_dim=int(manifest["input_dim"]),
        hidden_dim=int(manifest["hidden_dim"]),
    )
