"""Softmax classifiers (linear and one-hidden-layer tanh MLP) with hand gradients.

Gradients are exact, not autograd: the test suite checks them against central
finite differences, and the two-tier weighting math downstream relies on the
batch loss being the plain weighted mean (1/|B|) * sum_i w_i * l_i.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArguments, InvalidWeight, ShapeError


def _init_layer(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = np.zeros(fan_out)
    return w, b


def init_params(kind: str, feature_dim: int, num_classes: int,
                hidden_dim: int = 32, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded parameter initialization; weights uniform in +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    if kind == "linear":
        w, b = _init_layer(rng, feature_dim, num_classes)
        return {"w": w, "b": b}
    if kind == "mlp1":
        w1, b1 = _init_layer(rng, feature_dim, hidden_dim)
        w2, b2 = _init_layer(rng, hidden_dim, num_classes)
        return {"w1": w1, "b1": b1, "w2": w2, "b2": b2}
    raise InvalidArguments(f"unknown model kind {kind!r} (expected 'linear' or 'mlp1')")


def forward_logits(params: dict, x: np.ndarray):
    """Return (logits, cache); cache feeds the matching backward pass."""
    if "w" in params:
        return x @ params["w"] + params["b"], {"x": x}
    h = np.tanh(x @ params["w1"] + params["b1"])
    return h @ params["w2"] + params["b2"], {"x": x, "h": h}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def per_example_loss(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Cross-entropy per example, max-subtracted for overflow safety."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(labels)), labels]


def weighted_batch_loss(losses: np.ndarray, weights: np.ndarray) -> float:
    """(1/|B|) * sum_i w_i * l_i.

    The 1/|B| normalizer (not 1/sum w) is what makes per-example weights act
    as literal loss multipliers.
    """
    if losses.shape != weights.shape:
        raise ShapeError(f"losses {losses.shape} vs weights {weights.shape}")
    return float(np.mean(weights * losses))


def loss_and_grads(params: dict, x: np.ndarray, labels: np.ndarray,
                   weights: np.ndarray | None = None):
    """Weighted mean loss and its exact gradients w.r.t. every parameter."""
    n = len(labels)
    if weights is None:
        weights = np.ones(n)
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise InvalidWeight(f"weights must be finite and non-negative: min={weights.min()}")
    logits, cache = forward_logits(params, x)
    losses = per_example_loss(logits, labels)
    loss = weighted_batch_loss(losses, weights)

    dz = softmax(logits)
    dz[np.arange(n), labels] -= 1.0
    dz *= (weights / n)[:, None]

    if "w" in params:
        grads = {"w": cache["x"].T @ dz, "b": dz.sum(axis=0)}
    else:
        h = cache["h"]
        dh = dz @ params["w2"].T
        da = dh * (1.0 - h * h)
        grads = {
            "w1": cache["x"].T @ da,
            "b1": da.sum(axis=0),
            "w2": h.T @ dz,
            "b2": dz.sum(axis=0),
        }
    return loss, grads, losses


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    if lr <= 0 or not np.isfinite(lr):
        raise InvalidArguments(f"learning rate must be positive and finite, got {lr}")
    return {k: params[k] - lr * grads[k] for k in params}


def predict(params: dict, x: np.ndarray) -> np.ndarray:
    logits, _ = forward_logits(params, x)
    return logits.argmax(axis=1)


def clone_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def flatten_params(params: dict) -> np.ndarray:
    """Deterministic (key-sorted) concatenation, for drift comparisons."""
    return np.concatenate([params[k].ravel() for k in sorted(params)])


@dataclass
class SoftmaxClassifier:
    """Thin stateful wrapper used by the training loop."""

    kind: str
    feature_dim: int
    num_classes: int
    hidden_dim: int = 32
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            self.params = init_params(self.kind, self.feature_dim, self.num_classes,
                                      self.hidden_dim, self.seed)

    def losses(self, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
        logits, _ = forward_logits(self.params, x)
        return per_example_loss(logits, labels)

    def step(self, x: np.ndarray, labels: np.ndarray, weights: np.ndarray,
             lr: float) -> tuple[float, np.ndarray]:
        loss, grads, losses = loss_and_grads(self.params, x, labels, weights)
        self.params = sgd_step(self.params, grads, lr)
        return loss, losses

    def predict(self, x: np.ndarray) -> np.ndarray:
        return predict(self.params, x)

    def snapshot(self) -> dict:
        return clone_params(self.params)
