"""Convex model kinds: linear regression (squared error) and multinomial
logistic regression. Both expose per-sample losses and per-sample gradients so
the engine can clip each sample's gradient before averaging."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

_LOG_FLOOR = 1e-12


class LinearRegression:
    """y ~ x . coef + intercept, squared-error loss; weights = [coef, intercept]."""

    is_classification = False

    def __init__(self, feature_dim: int):
        if feature_dim < 1:
            raise ParameterError(f"feature_dim must be >= 1, got {feature_dim}")
        self.feature_dim = int(feature_dim)

    @property
    def dim(self) -> int:
        return self.feature_dim + 1

    def init_weights(self) -> np.ndarray:
        return np.zeros(self.dim)

    def predict(self, weights: np.ndarray, features: np.ndarray) -> np.ndarray:
        return features @ weights[:-1] + weights[-1]

    def per_sample_losses(self, weights, features, targets) -> np.ndarray:
        resid = self.predict(weights, features) - targets
        return resid * resid

    def per_sample_gradients(self, weights, features, targets) -> np.ndarray:
        resid = self.predict(weights, features) - targets
        grads = np.empty((len(targets), self.dim))
        grads[:, :-1] = 2.0 * resid[:, None] * features
        grads[:, -1] = 2.0 * resid
        return grads

    def metrics(self, weights, features, targets) -> tuple[float, float | None]:
        return float(np.mean(self.per_sample_losses(weights, features, targets))), None


class LogisticRegression:
    """Multinomial logistic regression with per-class intercepts.

    weights flatten a (num_classes, feature_dim + 1) matrix, last column the
    intercepts. At the zero vector every class is equally likely, so the
    per-sample loss is ln(num_classes).
    """

    is_classification = True

    def __init__(self, feature_dim: int, num_classes: int):
        if feature_dim < 1:
            raise ParameterError(f"feature_dim must be >= 1, got {feature_dim}")
        if num_classes < 2:
            raise ParameterError(f"num_classes must be >= 2, got {num_classes}")
        self.feature_dim = int(feature_dim)
        self.num_classes = int(num_classes)

    @property
    def dim(self) -> int:
        return self.num_classes * (self.feature_dim + 1)

    def init_weights(self) -> np.ndarray:
        return np.zeros(self.dim)

    def _probs(self, weights, features) -> np.ndarray:
        w = weights.reshape(self.num_classes, self.feature_dim + 1)
        logits = features @ w[:, :-1].T + w[:, -1]
        logits -= logits.max(axis=1, keepdims=True)
        exp = np.exp(logits)
        return exp / exp.sum(axis=1, keepdims=True)

    def predict(self, weights, features) -> np.ndarray:
        return np.argmax(self._probs(weights, features), axis=1)

    def per_sample_losses(self, weights, features, targets) -> np.ndarray:
        probs = self._probs(weights, features)
        picked = probs[np.arange(len(targets)), targets.astype(int)]
        return -np.log(np.maximum(picked, _LOG_FLOOR))

    def per_sample_gradients(self, weights, features, targets) -> np.ndarray:
        probs = self._probs(weights, features)
        dlogits = probs.copy()
        dlogits[np.arange(len(targets)), targets.astype(int)] -= 1.0
        # gradient wrt w[c] is dlogits[:, c] * [x, 1]
        grads = np.empty((len(targets), self.num_classes, self.feature_dim + 1))
        grads[:, :, :-1] = dlogits[:, :, None] * features[:, None, :]
        grads[:, :, -1] = dlogits
        return grads.reshape(len(targets), self.dim)

    def metrics(self, weights, features, targets) -> tuple[float, float]:
        loss = float(np.mean(self.per_sample_losses(weights, features, targets)))
        accuracy = float(np.mean(self.predict(weights, features) == targets.astype(int)))
        return loss, accuracy


@dataclass(frozen=True)
class ModelState:
    """Current weights plus the model kind that interprets them."""

    weights: np.ndarray
    model_kind: LinearRegression | LogisticRegression

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", weights)
        if weights.shape != (self.model_kind.dim,):
            raise ParameterError(
                f"weights have shape {weights.shape}, model needs ({self.model_kind.dim},)")
        if not np.all(np.isfinite(weights)):
            raise ParameterError("weights must be finite")

    def replaced(self, weights: np.ndarray) -> "ModelState":
        return ModelState(weights, self.model_kind)
