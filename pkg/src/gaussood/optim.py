"""Moment-based (Adam-style) parameter updates shared by all trainers."""

from __future__ import annotations

import numpy as np


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or gradient turns non-finite during training."""


class AdamState:
    """First/second-moment accumulator for one parameter array."""

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, param, grad, lr):
        """Update `param` in place with one bias-corrected Adam step."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad**2
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
