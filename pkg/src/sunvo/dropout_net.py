"""A small fully connected regressor with Bernoulli dropout on the input of
every layer, trained on the half-squared-chord sun loss and sampled with
Monte-Carlo dropout.

Dropout is inverted (kept units are scaled by ``1/(1-p)``) so the
deterministic forward pass with no masks is the expectation of the
stochastic one for linear layers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import DimensionMismatch
from .sun_sensing import DEFAULT_TAU_INV, SunMeasurement, mc_covariance_azzen, mc_mean

_ACTIVATIONS = ("relu", "tanh", "linear")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"
    dropout: float = 0.0  # probability of dropping each input unit

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float).reshape(-1)
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise DimensionMismatch("bias length does not match weight rows")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout probability must lie in [0, 1)")


@dataclass
class DropoutNetwork:
    layers: List[Layer]
    seed: int = 0

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise DimensionMismatch("layer dimensions do not chain")
        if self.layers[-1].weight.shape[0] != 3:
            raise DimensionMismatch("network output must be 3-dimensional")

    @classmethod
    def create(cls, sizes, dropout=0.5, seed=0, hidden_activation="relu") -> "DropoutNetwork":
        """He-initialized MLP; ``sizes`` runs from input width to 3."""
        rng = np.random.default_rng(seed)
        ps = [dropout] * (len(sizes) - 1) if np.isscalar(dropout) else list(dropout)
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = "linear" if i == len(sizes) - 2 else hidden_activation
            W = rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_out, n_in))
            layers.append(Layer(W, np.zeros(n_out), act, float(ps[i])))
        return cls(layers, seed)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    def copy(self) -> "DropoutNetwork":
        return DropoutNetwork(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation, l.dropout) for l in self.layers], self.seed
        )

    def weight_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(l.weight**2)) for l in self.layers))

    def sample_masks(self, rng: np.random.Generator, batch: int) -> list:
        masks = []
        for l in self.layers:
            if l.dropout == 0.0:
                masks.append(None)
            else:
                keep = rng.random((batch, l.weight.shape[1])) >= l.dropout
                masks.append(keep / (1.0 - l.dropout))
        return masks

    def forward(self, X, masks=None, return_cache=False):
        """Raw (unnormalized) 3-vector outputs for inputs ``(n, d)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.input_dim:
            raise DimensionMismatch(f"input width {X.shape[1]} != network input {self.input_dim}")
        cache = []
        h = X
        for i, l in enumerate(self.layers):
            m = None if masks is None else masks[i]
            a_in = h if m is None else h * m
            z = a_in @ l.weight.T + l.bias
            if l.activation == "relu":
                h = np.maximum(z, 0.0)
            elif l.activation == "tanh":
                h = np.tanh(z)
            else:
                h = z
            cache.append((a_in, z, h))
        return (h, cache) if return_cache else h

    def predict(self, X) -> np.ndarray:
        out = self.forward(X)
        return out / np.linalg.norm(out, axis=1, keepdims=True)

    # -- training ---------------------------------------------------------

    def loss_and_grads(self, X, S, weight_decay=0.0, masks=None):
        """Mean half-squared chord between normalized outputs and unit targets
        ``S``, plus ``weight_decay * sum ||W||^2``; returns (loss, grads)."""
        S = np.atleast_2d(np.asarray(S, dtype=float))
        out, cache = self.forward(X, masks, return_cache=True)
        n = out.shape[0]
        norm = np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)
        u = out / norm
        diff = u - S
        data_loss = 0.5 * float(np.sum(diff * diff)) / n
        reg = weight_decay * sum(float(np.sum(l.weight**2)) for l in self.layers)

        g_u = diff / n
        # d u / d out = (I - u u^T) / |out|
        g = (g_u - u * np.sum(g_u * u, axis=1, keepdims=True)) / norm
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            l = self.layers[i]
            a_in, z, h = cache[i]
            if l.activation == "relu":
                g = g * (z > 0.0)
            elif l.activation == "tanh":
                g = g * (1.0 - h * h)
            gW = g.T @ a_in + 2.0 * weight_decay * l.weight
            gb = g.sum(axis=0)
            grads[i] = (gW, gb)
            g = g @ l.weight
            if masks is not None and masks[i] is not None:
                g = g * masks[i]
        return data_loss + reg, grads

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "layers": [
                {
                    "in": int(l.weight.shape[1]),
                    "out": int(l.weight.shape[0]),
                    "activation": l.activation,
                    "dropout": l.dropout,
                    "weight": [float(x) for x in l.weight.ravel()],
                    "bias": [float(x) for x in l.bias],
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "DropoutNetwork":
        layers = []
        for ld in d["layers"]:
            W = np.asarray(ld["weight"], dtype=float).reshape(ld["out"], ld["in"])
            layers.append(Layer(W, np.asarray(ld["bias"], dtype=float), ld["activation"], float(ld["dropout"])))
        return cls(layers, int(d.get("seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "DropoutNetwork":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class TrainingHistory:
    epoch_loss: List[float] = field(default_factory=list)


def train_toy_network(
    X,
    S,
    net: DropoutNetwork,
    epochs: int = 100,
    lr: float = 0.02,
    weight_decay: float = 1e-5,
    batch_size: int = 64,
    momentum: float = 0.9,
    seed: Optional[int] = None,
    history: Optional[TrainingHistory] = None,
) -> DropoutNetwork:
    """Minibatch SGD with momentum and dropout. Returns a new network.

    ``history.epoch_loss[0]`` is the full-batch objective before training
    (deterministic pass), followed by one entry per epoch.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if X.shape[0] != S.shape[0] or S.shape[1] != 3:
        raise DimensionMismatch(f"features {X.shape} and labels {S.shape} do not align")
    if X.shape[1] != net.input_dim:
        raise DimensionMismatch(f"feature width {X.shape[1]} != network input {net.input_dim}")
    if np.any(np.abs(np.linalg.norm(S, axis=1) - 1.0) > 1e-6):
        raise ValueError("labels must be unit vectors")
    net = net.copy()
    rng = np.random.default_rng(net.seed if seed is None else seed)
    if history is not None:
        history.epoch_loss.append(net.loss_and_grads(X, S, weight_decay)[0])
    velocity = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in net.layers]
    n = X.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            masks = net.sample_masks(rng, len(idx))
            _, grads = net.loss_and_grads(X[idx], S[idx], weight_decay, masks)
            for l, (vW, vb), (gW, gb) in zip(net.layers, velocity, grads):
                vW *= momentum
                vW -= lr * gW
                vb *= momentum
                vb -= lr * gb
                l.weight += vW
                l.bias += vb
        if history is not None:
            history.epoch_loss.append(net.loss_and_grads(X, S, weight_decay)[0])
    return net


@dataclass(frozen=True)
class MCConfig:
    n_samples: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("MC sampling needs at least two samples")


def mc_sample(net: DropoutNetwork, x, cfg: MCConfig = MCConfig()) -> np.ndarray:
    """``(N, 3)`` unit outputs from N passes with fresh dropout masks.

    The mask stream of sample ``n`` is seeded by ``(cfg.seed, n)`` so results
    do not depend on evaluation order.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    out = np.empty((cfg.n_samples, 3))
    for n in range(cfg.n_samples):
        rng = np.random.default_rng([cfg.seed, n])
        out[n] = net.forward(x, net.sample_masks(rng, 1))[0]
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def mc_sample_batch(net: DropoutNetwork, X, cfg: MCConfig = MCConfig()) -> np.ndarray:
    """``(n_inputs, N, 3)``; sample ``n`` of every input shares the ``(seed, n)`` stream."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.empty((X.shape[0], cfg.n_samples, 3))
    for n in range(cfg.n_samples):
        rng = np.random.default_rng([cfg.seed, n])
        out[:, n] = net.forward(X, net.sample_masks(rng, X.shape[0]))
    return out / np.linalg.norm(out, axis=2, keepdims=True)


def mc_measurements(net: DropoutNetwork, X, cfg: MCConfig = MCConfig(), tau_inv=DEFAULT_TAU_INV, frame_ids=None):
    samples = mc_sample_batch(net, X, cfg)
    ids = range(len(samples)) if frame_ids is None else frame_ids
    return [SunMeasurement(int(k), mc_mean(s), mc_covariance_azzen(s, tau_inv)) for k, s in zip(ids, samples)]


# -- synthetic shadow-feature task ----------------------------------------

TASK_SEED = 20170529


def random_camera_sun(rng: np.random.Generator, n: int, zenith_range=(15.0, 80.0)) -> np.ndarray:
    """Camera-frame sun directions with zenith uniform in ``zenith_range`` (deg)."""
    from .ephemeris import azzen_to_vec

    zen = np.radians(rng.uniform(*zenith_range, size=n))
    az = rng.uniform(-math.pi, math.pi, size=n)
    return azzen_to_vec(np.stack([zen, az], axis=1))


def shadow_encoder(dim: int = 8) -> tuple:
    """Fixed linear encoding ``x = A s + c`` shared by every task draw."""
    rng = np.random.default_rng(TASK_SEED)
    A = rng.normal(size=(dim, 3))
    c = rng.normal(scale=0.5, size=dim)
    return A, c


def make_shadow_task(n: int, seed: int, noise: float = 0.42, dim: int = 8):
    """Features are a noisy linear encoding of the camera-frame sun direction;
    labels are the unit directions."""
    rng = np.random.default_rng(seed)
    S = random_camera_sun(rng, n)
    A, c = shadow_encoder(dim)
    X = S @ A.T + c + rng.normal(scale=noise, size=(n, dim))
    return X, S
