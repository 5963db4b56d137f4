"""Dense numeric primitives shared by the client and server code.

Everything works on float64 numpy arrays. The helpers are thin on purpose:
they pin down conventions (population variance, max-shifted softmax,
derivative of the leaky rectifier at zero) that the gradient code relies on.
"""
from __future__ import annotations

import numpy as np

DEFAULT_LN_EPS = 1e-5


def layer_norm(v, epsilon: float = DEFAULT_LN_EPS) -> np.ndarray:
    """Normalize along the last axis to zero mean and unit population variance.

    No gain or bias is applied.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] == 0:
        raise ValueError("layer_norm needs a non-empty vector")
    mean = v.mean(axis=-1, keepdims=True)
    centered = v - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    return centered / np.sqrt(var + epsilon)


def leaky_relu(x, slope: float):
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0.0, x, slope * x)
    return float(out) if out.ndim == 0 else out


def leaky_relu_grad(x, slope: float):
    # kink at 0 takes the positive branch
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0.0, 1.0, slope)


def softmax_row(scores) -> np.ndarray:
    """Softmax over the last axis, shifted by the row max."""
    s = np.asarray(scores, dtype=np.float64)
    if s.shape[-1] == 0:
        raise ValueError("softmax over an empty row")
    if not np.all(np.isfinite(s)):
        raise ValueError("softmax input contains NaN or Inf")
    shifted = s - s.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def softmax_row_backward(probs: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of a row softmax: p * (g - <p, g>)."""
    inner = np.sum(probs * grad_out, axis=-1, keepdims=True)
    return probs * (grad_out - inner)


def _check_2d(m: np.ndarray) -> None:
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")


def matvec(m, v) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_2d(m)
    if v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ValueError(f"cannot multiply {m.shape} matrix by length-{v.shape} vector")
    return m @ v


def rmatvec(m, v) -> np.ndarray:
    """Transpose product m^T v."""
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_2d(m)
    if v.ndim != 1 or m.shape[0] != v.shape[0]:
        raise ValueError(f"cannot multiply transpose of {m.shape} by length-{v.shape} vector")
    return m.T @ v


def outer(u, v) -> np.ndarray:
    return np.outer(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64))
