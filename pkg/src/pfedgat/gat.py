"""Server-side graph attention over the complete client graph.

Each uploaded parameter vector is layer-normalized into a node feature.
Every head projects the features, scores every ordered client pair with an
additive attention vector, and row-softmaxes the scores. The head average
is the allocation matrix whose row i mixes all uploads into client i's
personalized model.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from pfedgat.numerics import DEFAULT_LN_EPS, layer_norm, leaky_relu, softmax_row

_TAG_GAT = 0x4754


@dataclass
class GatHead:
    W: np.ndarray  # (d', d)
    a: np.ndarray  # (2d',)

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def copy(self) -> "GatHead":
        return GatHead(self.W.copy(), self.a.copy())


@dataclass
class GatParams:
    heads: list[GatHead]
    leaky_slope: float = 0.2

    def __post_init__(self):
        if not self.heads:
            raise ValueError("need at least one attention head")
        d_out, d_in = self.heads[0].W.shape
        for h in self.heads:
            if h.W.shape != (d_out, d_in) or h.a.shape != (2 * d_out,):
                raise ValueError("inconsistent head shapes")

    @property
    def in_dim(self) -> int:
        return self.heads[0].W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.heads[0].W.shape[0]

    def copy(self) -> "GatParams":
        return GatParams([h.copy() for h in self.heads], self.leaky_slope)


def init_gat(d: int, d_out: int = 16, n_heads: int = 8, slope: float = 0.2, seed: int = 0) -> GatParams:
    """Uniform init: W in +-1/sqrt(d), a in +-1/sqrt(2 d_out), one stream per head."""
    heads = []
    for k in range(n_heads):
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, _TAG_GAT, k])
        lw = 1.0 / np.sqrt(d)
        la = 1.0 / np.sqrt(2 * d_out)
        heads.append(GatHead(rng.uniform(-lw, lw, (d_out, d)), rng.uniform(-la, la, 2 * d_out)))
    return GatParams(heads, slope)


def build_node_features(uploads: Sequence[np.ndarray], epsilon: float = DEFAULT_LN_EPS) -> np.ndarray:
    """Stack layer-normalized flattened uploads into an (N, d) matrix."""
    if len(uploads) == 0:
        raise ValueError("no uploads")
    dims = {np.shape(u) for u in uploads}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ValueError(f"uploads must be flat vectors of one length, got shapes {sorted(dims)}")
    return layer_norm(np.vstack(uploads), epsilon)


@dataclass
class HeadCache:
    z: np.ndarray  # (N, d') projected features
    raw: np.ndarray  # (N, N) pre-activation scores
    e: np.ndarray  # (N, N) scores after LeakyReLU
    alpha: np.ndarray  # (N, N) attention rows
    a: np.ndarray  # attention vector used for this forward pass


@dataclass
class ForwardTape:
    H: np.ndarray
    slope: float
    heads: list[HeadCache] = field(default_factory=list)


def attention_head(H: np.ndarray, head: GatHead, slope: float) -> tuple[np.ndarray, HeadCache]:
    if H.ndim != 2 or H.shape[1] != head.W.shape[1]:
        raise ValueError(f"node features {H.shape} do not fit projection {head.W.shape}")
    d_out = head.out_dim
    z = H @ head.W.T
    # a^T [z_i || z_j] splits into a source term for i and a target term for j
    src = z @ head.a[:d_out]
    dst = z @ head.a[d_out:]
    raw = src[:, None] + dst[None, :]
    e = leaky_relu(raw, slope)
    alpha = softmax_row(e)
    return alpha, HeadCache(z, raw, e, alpha, head.a.copy())


def allocation_matrix(H: np.ndarray, gat: GatParams) -> tuple[np.ndarray, ForwardTape]:
    tape = ForwardTape(H, gat.leaky_slope)
    R = np.zeros((H.shape[0], H.shape[0]))
    for head in gat.heads:
        alpha, cache = attention_head(H, head, gat.leaky_slope)
        tape.heads.append(cache)
        R += alpha
    return R / len(gat.heads), tape


def aggregate(R: np.ndarray, uploads: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Row i of R mixes all uploads into client i's personalized parameters."""
    R = np.asarray(R, dtype=np.float64)
    n = len(uploads)
    if R.shape != (n, n):
        raise ValueError(f"allocation matrix {R.shape} does not match {n} uploads")
    mixed = R @ np.vstack(uploads)
    return list(mixed)
