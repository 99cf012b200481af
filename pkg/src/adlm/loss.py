"""Cross-entropy over sigmoid outputs and its second-order Taylor surrogate.

With ``z_il = h_i . W_l`` the surrogate is ``sum_il c0 + c1 z + c2 z^2`` where
the coefficients depend on the label only: ``c0 = log 2``, ``c1 = 1/2 - y``,
``c2 = 1/8``. Private training replaces them with noised copies.
"""
import math
from dataclasses import dataclass

import numpy as np

LOG2 = math.log(2.0)
PROB_CLAMP = 1e-12


@dataclass
class LossValue:
    """Loss value plus gradients w.r.t. the logits ``z``, output weights and top hidden state."""

    value: float
    grad_logits: np.ndarray
    grad_weights: np.ndarray
    grad_hidden: np.ndarray


def taylor_coefficients(labels):
    """``(n, M, 3)`` array of ``(log 2, 1/2 - y, 1/8)`` per example and class."""
    y = np.asarray(labels, dtype=np.float64)
    c = np.empty(y.shape + (3,))
    c[..., 0] = LOG2
    c[..., 1] = 0.5 - y
    c[..., 2] = 0.125
    return c


def _logits(hidden, weights):
    h = np.atleast_2d(np.asarray(hidden, dtype=np.float64))
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    return h, w, h @ w.T


def cross_entropy_from_logits(z, labels):
    """Sum of per-class binary cross-entropies and its gradient w.r.t. ``z``."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(0.5 * (1.0 + np.tanh(0.5 * z)), PROB_CLAMP, 1.0 - PROB_CLAMP)
    value = -float(np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
    return value, p - y


def exact_cross_entropy(hidden, weights, labels):
    """``-sum_il [y log s(z) + (1 - y) log(1 - s(z))]`` with ``z = h W^T``."""
    h, w, z = _logits(hidden, weights)
    value, gz = cross_entropy_from_logits(z, labels)
    return LossValue(value, gz, gz.T @ h, gz @ w)


def polynomial_from_logits(z, coefficients):
    c = np.asarray(coefficients, dtype=np.float64)
    if c.shape != z.shape + (3,):
        raise ValueError(f"coefficients shape {c.shape} does not match logits {z.shape}")
    c0, c1, c2 = c[..., 0], c[..., 1], c[..., 2]
    value = float(np.sum(c0 + c1 * z + c2 * z * z))
    return value, c1 + 2.0 * c2 * z


def taylor_loss(hidden, weights, coefficients):
    """Quadratic surrogate ``sum c0 + c1 z + c2 z^2`` and its closed-form gradients."""
    h, w, z = _logits(hidden, weights)
    value, gz = polynomial_from_logits(z, coefficients)
    return LossValue(value, gz, gz.T @ h, gz @ w)


def perturbed_taylor_loss(hidden, weights, perturbed_coefficients):
    """Same polynomial with noised coefficients; still quadratic in ``z``."""
    return taylor_loss(hidden, weights, perturbed_coefficients)


def approximation_error_bound(n_classes):
    """``M (e^2 + 2e - 1) / (e (1 + e)^2)``: bound on the average error from
    minimizing the truncated series instead of the full one."""
    if n_classes < 1:
        raise ValueError("need at least one class")
    e = math.e
    return n_classes * (e * e + 2 * e - 1) / (e * (1 + e) ** 2)
