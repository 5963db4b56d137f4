"""Backward pass through aggregation and attention, and the SGD step on the heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from pfedgat.client import ClientFeedback
from pfedgat.gat import ForwardTape, GatHead, GatParams, HeadCache
from pfedgat.numerics import leaky_relu_grad, softmax_row_backward


@dataclass
class HeadGrad:
    dW: np.ndarray
    da: np.ndarray


def total_loss(feedback: Sequence[ClientFeedback]) -> float:
    if len(feedback) == 0:
        raise ValueError("no client feedback")
    return float(sum(fb.loss for fb in feedback))


def stack_feedback(feedback: Sequence, d: int) -> np.ndarray:
    """(N, d) matrix of feedback gradients; accepts ClientFeedback or raw vectors."""
    G = np.empty((len(feedback), d))
    for i, fb in enumerate(feedback):
        g = fb.grad_wrt_received if isinstance(fb, ClientFeedback) else fb
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (d,):
            raise ValueError(f"client {i}: feedback gradient has shape {g.shape}, expected ({d},)")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"client {i}: feedback gradient is not finite")
        G[i] = g
    return G


def allocation_grad(uploads: Sequence[np.ndarray], feedback: Sequence) -> np.ndarray:
    """dL/dR[i, j] = <dL_i/dtheta_i', theta_j> where theta_i' = sum_j R[i, j] theta_j."""
    Theta = np.vstack(uploads)
    n, d = Theta.shape
    if len(feedback) != n:
        raise ValueError(f"{len(feedback)} feedback entries for {n} uploads")
    return stack_feedback(feedback, d) @ Theta.T


def head_backward(cache: HeadCache, d_alpha: np.ndarray, H: np.ndarray, slope: float) -> HeadGrad:
    d_e = softmax_row_backward(cache.alpha, d_alpha)
    d_raw = d_e * leaky_relu_grad(cache.raw, slope)
    # raw[i, j] = src[i] + dst[j]
    d_src = d_raw.sum(axis=1)
    d_dst = d_raw.sum(axis=0)
    d_out = cache.z.shape[1]
    a_src, a_dst = cache.a[:d_out], cache.a[d_out:]
    da = np.concatenate([cache.z.T @ d_src, cache.z.T @ d_dst])
    dz = np.outer(d_src, a_src) + np.outer(d_dst, a_dst)
    return HeadGrad(dW=dz.T @ H, da=da)


def backward(tape: ForwardTape, uploads: Sequence[np.ndarray], feedback: Sequence) -> list[HeadGrad]:
    """Gradients of the summed client losses with respect to every head's (W, a).

    Node features are held constant: nothing flows back into client parameters.
    """
    n = len(uploads)
    if tape.H.shape[0] != n:
        raise ValueError(f"tape describes {tape.H.shape[0]} clients, got {n} uploads")
    d_alpha = allocation_grad(uploads, feedback) / len(tape.heads)
    return [head_backward(c, d_alpha, tape.H, tape.slope) for c in tape.heads]


def clip_grads(grads: list[HeadGrad], max_norm: float) -> list[HeadGrad]:
    """Rescale all head gradients jointly so their global norm is at most max_norm."""
    sq = sum(float(np.sum(g.dW ** 2) + np.sum(g.da ** 2)) for g in grads)
    norm = np.sqrt(sq)
    if norm <= max_norm or norm == 0.0:
        return grads
    s = max_norm / norm
    return [HeadGrad(g.dW * s, g.da * s) for g in grads]


def apply_update(
    gat: GatParams, grads: Sequence[HeadGrad], lr: float, max_norm: Optional[float] = None
) -> GatParams:
    """One SGD step on every head; returns new parameters."""
    if len(grads) != len(gat.heads):
        raise ValueError(f"{len(grads)} head gradients for {len(gat.heads)} heads")
    for h, g in zip(gat.heads, grads):
        if g.dW.shape != h.W.shape or g.da.shape != h.a.shape:
            raise ValueError("gradient shapes do not match head shapes")
    if max_norm is not None:
        grads = clip_grads(list(grads), max_norm)
    heads = [GatHead(h.W - lr * g.dW, h.a - lr * g.da) for h, g in zip(gat.heads, grads)]
    return GatParams(heads, gat.leaky_slope)
