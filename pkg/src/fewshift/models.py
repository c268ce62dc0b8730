"""Desk-scale encoder stacks: MLP encoders, the dual image/text encoder with
joint-embedding projections, and the vision-only classifier with freeze control.

All forward passes cache activations so gradients can be pushed back by hand;
every model exposes get_params()/set_params() over a shared ParamVector layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import NumericsError, ParamEntry, ParamVector


@dataclass
class EncoderSpec:
    input_dim: int
    hidden_dims: list[int]
    output_dim: int
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        if any(d < 1 for d in dims):
            raise NumericsError("all encoder dimensions must be >= 1")
        if self.activation not in ("tanh", "relu"):
            raise NumericsError(f"unknown activation {self.activation!r}")


def _act(x: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(x) if kind == "tanh" else np.maximum(x, 0.0)


def _act_grad(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(pre)
        return 1.0 - t * t
    return (pre > 0.0).astype(np.float64)


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    b = rng.uniform(-bound, bound, size=fan_out)
    return w, b


class Mlp:
    """Fully connected stack; activation on hidden layers, linear output."""

    def __init__(self, spec: EncoderSpec, prefix: str):
        self.spec = spec
        self.prefix = prefix
        rng = np.random.default_rng(spec.seed)
        dims = [spec.input_dim, *spec.hidden_dims, spec.output_dim]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i in range(len(dims) - 1):
            w, b = _init_linear(rng, dims[i], dims[i + 1])
            self.weights.append(w)
            self.biases.append(b)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray):
        """Returns (output, cache). x is (B, input_dim)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.spec.input_dim:
            raise NumericsError(
                f"{self.prefix}: expected input dim {self.spec.input_dim}, got {x.shape[1]}"
            )
        cache = []
        h = x
        last = self.num_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = h @ w.T + b
            cache.append((h, pre))
            h = _act(pre, self.spec.activation) if i < last else pre
        return h, cache

    def backward(self, dout: np.ndarray, cache):
        """Returns (dx, [(dW, db) per layer])."""
        grads = [None] * self.num_layers
        d = dout
        last = self.num_layers - 1
        for i in range(last, -1, -1):
            h_in, pre = cache[i]
            dpre = d if i == last else d * _act_grad(pre, self.spec.activation)
            grads[i] = (dpre.T @ h_in, dpre.sum(axis=0))
            d = dpre @ self.weights[i]
        return d, grads

    def param_entries(self, trainable: bool = True) -> list[ParamEntry]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append(ParamEntry(f"{self.prefix}.{i}.weight", w, trainable))
            out.append(ParamEntry(f"{self.prefix}.{i}.bias", b, trainable))
        return out

    def load_entries(self, pv: ParamVector) -> None:
        for i in range(self.num_layers):
            self.weights[i] = pv[f"{self.prefix}.{i}.weight"].copy()
            self.biases[i] = pv[f"{self.prefix}.{i}.bias"].copy()


class DualEncoder:
    """Image and text encoders with projections into one embedding space.

    The two branches share no parameters; classification and the contrastive
    objective both operate on cosine similarities of the projected embeddings,
    scaled by a temperature.
    """

    def __init__(
        self,
        image_spec: EncoderSpec,
        text_spec: EncoderSpec,
        embed_dim: int,
        temperature: float = 0.07,
        seed: int = 0,
        trainable_temperature: bool = False,
    ):
        if temperature <= 0.0:
            raise NumericsError("temperature must be positive")
        self.embed_dim = embed_dim
        self.temperature = float(temperature)
        self.trainable_temperature = trainable_temperature
        self.encoders_frozen = False
        self.image_encoder = Mlp(image_spec, "image_encoder")
        self.text_encoder = Mlp(text_spec, "text_encoder")
        rng = np.random.default_rng(seed + 101)
        self.image_proj_w, self.image_proj_b = _init_linear(rng, image_spec.output_dim, embed_dim)
        self.text_proj_w, self.text_proj_b = _init_linear(rng, text_spec.output_dim, embed_dim)

    def encode_image(self, x: np.ndarray) -> np.ndarray:
        emb, _ = self._forward_image(x)
        return emb[0] if np.asarray(x).ndim == 1 else emb

    def encode_text(self, y: np.ndarray) -> np.ndarray:
        emb, _ = self._forward_text(y)
        return emb[0] if np.asarray(y).ndim == 1 else emb

    def _forward_image(self, x: np.ndarray):
        feats, cache = self.image_encoder.forward(x)
        emb = feats @ self.image_proj_w.T + self.image_proj_b
        return emb, (cache, feats)

    def _forward_text(self, y: np.ndarray):
        feats, cache = self.text_encoder.forward(y)
        emb = feats @ self.text_proj_w.T + self.text_proj_b
        return emb, (cache, feats)

    def _backward_image(self, demb: np.ndarray, ctx):
        cache, feats = ctx
        d_proj_w = demb.T @ feats
        d_proj_b = demb.sum(axis=0)
        dfeats = demb @ self.image_proj_w
        _, enc_grads = self.image_encoder.backward(dfeats, cache)
        return enc_grads, d_proj_w, d_proj_b

    def _backward_text(self, demb: np.ndarray, ctx):
        cache, feats = ctx
        d_proj_w = demb.T @ feats
        d_proj_b = demb.sum(axis=0)
        dfeats = demb @ self.text_proj_w
        _, enc_grads = self.text_encoder.backward(dfeats, cache)
        return enc_grads, d_proj_w, d_proj_b

    def set_linear_probe_mode(self, frozen: bool) -> None:
        """Frozen encoders leave only the two projections (and optionally the
        temperature) trainable."""
        self.encoders_frozen = bool(frozen)

    def get_params(self, encoders_trainable: bool | None = None) -> ParamVector:
        if encoders_trainable is None:
            encoders_trainable = not self.encoders_frozen
        entries = self.image_encoder.param_entries(encoders_trainable)
        entries += [
            ParamEntry("image_projection.weight", self.image_proj_w, True),
            ParamEntry("image_projection.bias", self.image_proj_b, True),
        ]
        entries += self.text_encoder.param_entries(encoders_trainable)
        entries += [
            ParamEntry("text_projection.weight", self.text_proj_w, True),
            ParamEntry("text_projection.bias", self.text_proj_b, True),
        ]
        entries.append(
            ParamEntry("temperature", np.array([self.temperature]), self.trainable_temperature)
        )
        return ParamVector(entries).copy()

    def set_params(self, pv: ParamVector) -> None:
        self.image_encoder.load_entries(pv)
        self.text_encoder.load_entries(pv)
        self.image_proj_w = pv["image_projection.weight"].copy()
        self.image_proj_b = pv["image_projection.bias"].copy()
        self.text_proj_w = pv["text_projection.weight"].copy()
        self.text_proj_b = pv["text_projection.bias"].copy()
        self.temperature = float(pv["temperature"][0])


class VisionClassifier:
    """Image encoder plus linear classification head.

    encoder_frozen=True is linear-probe mode: only the head is trainable and
    optimizer steps leave the encoder untouched.
    """

    def __init__(self, encoder_spec: EncoderSpec, num_classes: int, seed: int = 0):
        if num_classes < 1:
            raise NumericsError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.encoder = Mlp(encoder_spec, "encoder")
        rng = np.random.default_rng(seed + 202)
        self.head_w, self.head_b = _init_linear(rng, encoder_spec.output_dim, num_classes)
        self.encoder_frozen = False

    def set_linear_probe_mode(self, frozen: bool) -> None:
        self.encoder_frozen = bool(frozen)

    def logits(self, x: np.ndarray) -> np.ndarray:
        out, _ = self._forward(x)
        return out[0] if np.asarray(x).ndim == 1 else out

    def _forward(self, x: np.ndarray):
        feats, cache = self.encoder.forward(x)
        logits = feats @ self.head_w.T + self.head_b
        return logits, (cache, feats)

    def _backward(self, dlogits: np.ndarray, ctx):
        cache, feats = ctx
        d_head_w = dlogits.T @ feats
        d_head_b = dlogits.sum(axis=0)
        dfeats = dlogits @ self.head_w
        _, enc_grads = self.encoder.backward(dfeats, cache)
        return enc_grads, d_head_w, d_head_b

    def get_params(self) -> ParamVector:
        entries = self.encoder.param_entries(trainable=not self.encoder_frozen)
        entries += [
            ParamEntry("head.weight", self.head_w, True),
            ParamEntry("head.bias", self.head_b, True),
        ]
        return ParamVector(entries).copy()

    def set_params(self, pv: ParamVector) -> None:
        self.encoder.load_entries(pv)
        self.head_w = pv["head.weight"].copy()
        self.head_b = pv["head.bias"].copy()
