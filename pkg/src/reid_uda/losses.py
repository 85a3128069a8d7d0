"""Training objectives with analytic gradients.

Feature batches are ``(N, D)`` arrays with one integer label per row. Every
loss returns its value together with the gradient with respect to the
features (and, for the identity loss, the classifier head).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BatchStructureError, LabelError, ShapeError
from .rng import Rng


@dataclass(frozen=True)
class LossConfig:
    kappa: float = 1.0
    margin: float = 0.3
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5
    delta: float = 0.5

    def __post_init__(self):
        for name in ("kappa", "margin", "alpha", "beta", "gamma", "delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class ClassifierHead:
    weight: np.ndarray  # (M, D)
    bias: np.ndarray  # (M,)

    @classmethod
    def init(cls, classes: int, dim: int, rng: Rng) -> "ClassifierHead":
        limit = np.sqrt(6.0 / (classes + dim))
        return cls(rng.uniform(-limit, limit, size=(classes, dim)), np.zeros(classes))

    @property
    def classes(self) -> int:
        return self.weight.shape[0]


def _features(features) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeError(f"features must be (N, D), got {f.shape}")
    return f


def id_loss(head: ClassifierHead, features, labels):
    """Mean softmax cross-entropy of the head's logits.

    Returns ``(loss, head_grads, d_features)`` where ``head_grads`` is a
    ``ClassifierHead`` holding the weight and bias gradients.
    """
    f = _features(features)
    y = np.asarray(labels, dtype=np.int64)
    if len(y) != len(f):
        raise ShapeError("one label per feature row is required")
    if np.any(y < 0) or np.any(y >= head.classes):
        raise LabelError(f"labels must lie in [0, {head.classes})")
    n = len(f)
    logits = f @ head.weight.T + head.bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    loss = -log_p[np.arange(n), y].mean()
    dlogits = np.exp(log_p)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = ClassifierHead(dlogits.T @ f, dlogits.sum(axis=0))
    return float(loss), grads, dlogits @ head.weight


def check_batch(labels) -> np.ndarray:
    """Every label needs a second instance, and at least two labels are needed."""
    y = np.asarray(labels, dtype=np.int64)
    uniq, counts = np.unique(y, return_counts=True)
    if len(uniq) < 2:
        raise BatchStructureError("batch needs at least two identities")
    if np.any(counts < 2):
        raise BatchStructureError(f"identities {uniq[counts < 2].tolist()} have a single instance")
    return y


def pairwise_distances(f) -> np.ndarray:
    diff = f[:, None, :] - f[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def hardest_pairs(dist, labels):
    """Per anchor: index of the farthest positive and of the nearest negative."""
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]
    pos = np.where(same, dist, -np.inf).argmax(axis=1)
    neg = np.where(diff, dist, np.inf).argmin(axis=1)
    return pos, neg


def _unit(f, i, j, d):
    # d(||fi - fj||)/dfi; zero at coincident points
    return np.where(d[:, None] > 0, (f[i] - f[j]) / np.where(d > 0, d, 1.0)[:, None], 0.0)


def _mined(features, labels):
    f = _features(features)
    y = check_batch(labels)
    if len(y) != len(f):
        raise ShapeError("one label per feature row is required")
    dist = pairwise_distances(f)
    pos, neg = hardest_pairs(dist, y)
    idx = np.arange(len(f))
    return f, idx, pos, neg, dist[idx, pos], dist[idx, neg]


def _scatter(f, idx, pos, neg, d_pos, d_neg, coef):
    grad = np.zeros_like(f)
    u_pos = _unit(f, idx, pos, d_pos) * coef[:, None]
    u_neg = _unit(f, idx, neg, d_neg) * coef[:, None]
    grad += u_pos - u_neg
    np.add.at(grad, pos, -u_pos)
    np.add.at(grad, neg, u_neg)
    return grad / len(f)


def hard_triplet_loss(features, labels, margin: float = 0.3):
    """Batch-hard triplet hinge on plain L2 distances. Returns ``(loss, d_features)``."""
    f, idx, pos, neg, d_pos, d_neg = _mined(features, labels)
    hinge = d_pos - d_neg + margin
    active = (hinge > 0).astype(np.float64)
    loss = float(np.maximum(hinge, 0.0).mean())
    return loss, _scatter(f, idx, pos, neg, d_pos, d_neg, active)


def softmax_triplet_loss(features, labels):
    """``-log(e^{d-} / (e^{d-} + e^{d+}))`` per anchor with batch-hard mining.

    Equals ``softplus(d+ - d-)``, evaluated without overflow. Returns
    ``(loss, d_features)``.
    """
    f, idx, pos, neg, d_pos, d_neg = _mined(features, labels)
    gap = d_pos - d_neg
    loss = float(np.logaddexp(0.0, gap).mean())
    coef = np.exp(gap - np.logaddexp(0.0, gap))  # sigmoid(gap)
    return loss, _scatter(f, idx, pos, neg, d_pos, d_neg, coef)


def source_total(id_value: float, triplet_value: float, kappa: float) -> float:
    return id_value + kappa * triplet_value


def target_total(id_g: float, trip_g: float, trip_top: float, trip_bot: float, cfg: LossConfig) -> float:
    return cfg.alpha * id_g + cfg.beta * trip_g + cfg.gamma * trip_top + cfg.delta * trip_bot
