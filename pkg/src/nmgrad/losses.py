"""Tversky index and Focal Tversky loss with analytic gradients.

The index is a smoothed overlap score per class with asymmetric weights
on the two error kinds: ``alpha`` scales probability mass the true class
lost, ``beta`` scales mass wrongly granted to the class. The loss sums
(1 - index)^(1/gamma) over both classes, so hard examples (low index)
dominate when gamma > 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

# Floor for (1 - index) inside the gradient only: the power rule's exponent
# 1/gamma - 1 is negative for gamma > 1, so the derivative blows up as the
# index approaches 1. The loss value itself is never clamped.
_GRAD_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.7
    beta: float = 0.3
    gamma: float = 4.0 / 3.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("alpha and beta must be non-negative")
        if self.gamma < 1:
            raise ValidationError("gamma must be >= 1")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")


def _check_batch(predictions: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.ndim != 2 or labels.ndim != 2:
        raise ValidationError("predictions and labels must be 2-D (N, classes)")
    if predictions.shape != labels.shape:
        raise ValidationError(
            f"predictions shape {predictions.shape} != labels shape {labels.shape}"
        )
    if predictions.shape[0] < 1:
        raise ValidationError("need at least one sample")
    return predictions, labels


def tversky_index(
    predictions: np.ndarray,
    labels: np.ndarray,
    class_index: int,
    alpha: float = 0.7,
    beta: float = 0.3,
    epsilon: float = 1e-6,
) -> float:
    """Smoothed asymmetric overlap of one class' probabilities with its labels.

    With p = predictions[:, c] and y = labels[:, c]:

        (1 + sum(p*y) + eps) /
        (1 + sum(p*y) + alpha*sum((1-p)*y) + beta*sum(p*(1-y)) + eps)

    Always in (0, 1]; equals 1 exactly when p == y is one-hot.
    """
    predictions, labels = _check_batch(predictions, labels)
    p = predictions[:, class_index]
    y = labels[:, class_index]
    true_mass = float(np.dot(p, y))
    missed_mass = float(np.dot(1.0 - p, y))
    false_mass = float(np.dot(p, 1.0 - y))
    numerator = 1.0 + true_mass + epsilon
    denominator = 1.0 + true_mass + alpha * missed_mass + beta * false_mass + epsilon
    return numerator / denominator


def focal_tversky_loss(
    predictions: np.ndarray,
    labels: np.ndarray,
    config: LossConfig = LossConfig(),
) -> tuple[float, np.ndarray]:
    """Loss summed over both classes plus its gradient w.r.t. predictions.

    Each prediction entry is treated as a free variable (the gradient does
    not assume rows sum to one), which keeps finite-difference checks
    straightforward.
    """
    predictions, labels = _check_batch(predictions, labels)
    n_classes = predictions.shape[1]
    loss = 0.0
    grad = np.zeros_like(predictions)
    inv_gamma = 1.0 / config.gamma
    for c in range(n_classes):
        p = predictions[:, c]
        y = labels[:, c]
        true_mass = float(np.dot(p, y))
        missed_mass = float(np.dot(1.0 - p, y))
        false_mass = float(np.dot(p, 1.0 - y))
        numerator = 1.0 + true_mass + config.epsilon
        denominator = (1.0 + true_mass + config.alpha * missed_mass
                       + config.beta * false_mass + config.epsilon)
        index = numerator / denominator
        deficit = 1.0 - index
        loss += deficit ** inv_gamma if deficit > 0.0 else 0.0

        d_loss_d_index = -inv_gamma * max(deficit, _GRAD_FLOOR) ** (inv_gamma - 1.0)
        # d numerator / d p_i = y_i ; d denominator / d p_i =
        #   y_i - alpha*y_i + beta*(1 - y_i)
        d_den = y - config.alpha * y + config.beta * (1.0 - y)
        d_index = (y * denominator - numerator * d_den) / (denominator * denominator)
        grad[:, c] += d_loss_d_index * d_index
    return float(loss), grad
