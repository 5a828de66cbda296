"""Shared numeric test helpers: finite differences and controlled networks."""

import numpy as np

from gaussood import nn


def rel_err(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def fd_grad(fn, arr, step=1e-5):
    """Central-difference gradient of scalar fn() w.r.t. `arr`, in place."""
    out = np.zeros_like(arr)
    flat, flat_out = arr.ravel(), out.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        flat_out[i] = (hi - lo) / (2.0 * step)
    return out


def identity_network(dim, shift=1000.0):
    """A 3-layer network computing the exact identity on inputs > -shift.

    Hidden biases lift activations clear of the ReLU kink; the output
    bias removes the lift again.
    """
    eye = np.eye(dim)
    return nn.MlpNetwork(
        layer_dims=(dim, dim, dim, dim),
        weights=[eye.copy(), eye.copy(), eye.copy()],
        biases=[np.full(dim, shift), np.full(dim, shift), np.full(dim, -2.0 * shift)],
    )
