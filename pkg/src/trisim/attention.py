"""Cross-sentence spatial attention and per-sentence feature attention.

Spatial attention carries content (a convex combination of the partner's
vectors); feature attention carries multiplicative gates.  Both act on
``(..., H, L, D)`` semantic tensors and produce ``(..., H, L, D')``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (ParamSet, Tensor, affine, amax, as_tensor, broadcast_to, concat,
                     conv1x1, glorot_uniform, instance_norm, matmul, mean, mul, relu,
                     reshape, sigmoid, softmax, swapaxes)

FA_VARIANTS = ("none", "fa1", "fa2", "fa3")


@dataclass
class SaMaps:
    """Score and attention maps for one pair, ``N = H * L``.

    ``scores[i, j] = K_i . Q_j``; ``m_y[j, i]`` is the weight of Y's position
    ``j`` for X's position ``i`` and ``m_x[i, j]`` the weight of X's position
    ``i`` for Y's position ``j``.  Columns of both maps sum to one.
    """

    scores: np.ndarray
    m_y: np.ndarray
    m_x: np.ndarray


def _attend(a: Tensor, b: Tensor, scale: float) -> tuple[Tensor, Tensor, Tensor]:
    # rows of `a` attend over rows of `b`
    s = matmul(a, swapaxes(b, -1, -2))
    if scale != 1.0:
        s = mul(s, scale)
    weights = softmax(s, axis=-1)
    return matmul(weights, b), s, weights


def sa_forward(X, Y, w, b, scale_scores: bool = False) -> tuple[Tensor, Tensor, SaMaps]:
    """Spatial attention between two semantic tensors.

    ``X`` and ``Y`` are flattened to ``N x D`` (keys/values from X, queries
    and values from Y), cross-attended without learned projections, reshaped
    back and mapped to ``D'`` by the shared 1x1 convolution ``(w, b)``.
    """
    X, Y = as_tensor(X), as_tensor(Y)
    if X.shape != Y.shape or X.ndim < 3:
        raise ValueError(f"sa_forward: X {X.shape} and Y {Y.shape} must share (..., H, L, D)")
    *lead, H, L, D = X.shape
    N = H * L
    scale = 1.0 / np.sqrt(D) if scale_scores else 1.0
    K = reshape(X, (*lead, N, D))
    Q = reshape(Y, (*lead, N, D))
    x_flat, s, a_x = _attend(K, Q, scale)
    y_flat, _, a_y = _attend(Q, K, scale)
    maps = SaMaps(scores=s.data, m_y=np.swapaxes(a_x.data, -1, -2), m_x=np.swapaxes(a_y.data, -1, -2))
    x_sa = conv1x1(reshape(x_flat, X.shape), w, b)
    y_sa = conv1x1(reshape(y_flat, Y.shape), w, b)
    return x_sa, y_sa, maps


def _excite(z, w1, b1, w2, b2) -> Tensor:
    return sigmoid(affine(relu(affine(z, w1, b1)), w2, b2))


def _broadcast_gate(gate: Tensor, H: int, L: int) -> Tensor:
    *lead, Dp = gate.shape
    g = reshape(gate, (*lead, 1, 1, Dp))
    return broadcast_to(g, (*lead, H, L, Dp))


def fa1_forward(X, w1, b1, w2, b2) -> Tensor:
    """Average-pool squeeze and excitation; the gate is broadcast over (h, l)."""
    X = as_tensor(X)
    z = mean(X, (-3, -2))
    return _broadcast_gate(_excite(z, w1, b1, w2, b2), X.shape[-3], X.shape[-2])


def fa2_forward(X, w1, b1, w2, b2) -> Tensor:
    """Like :func:`fa1_forward` with ``[avg; max]`` descriptors of length 2D."""
    X = as_tensor(X)
    z = concat([mean(X, (-3, -2)), amax(X, (-3, -2))], axis=-1)
    return _broadcast_gate(_excite(z, w1, b1, w2, b2), X.shape[-3], X.shape[-2])


def fa3_forward(X, gamma, beta, wh, bh, wl, bl) -> Tensor:
    """Directional poolings, sigmoid + instance norm, per-channel outer product."""
    X = as_tensor(X)
    H, L = X.shape[-3], X.shape[-2]
    if H + L < 2:
        raise ValueError("fa3 needs H + L >= 2")
    z_h = mean(X, -2)  # (..., H, D)
    z_l = mean(X, -3)  # (..., L, D)
    g = instance_norm(sigmoid(concat([z_h, z_l], axis=-2)), gamma, beta)
    a = conv1x1(g[..., :H, :], wh, bh)  # (..., H, D')
    c = conv1x1(g[..., H:, :], wl, bl)  # (..., L, D')
    *lead, _, Dp = a.shape
    return mul(reshape(a, (*lead, H, 1, Dp)), reshape(c, (*lead, 1, L, Dp)))


def combine(x_sa, y_sa, fa_x=None, fa_y=None) -> tuple[Tensor, Tensor]:
    """Elementwise product of attention content and feature gates.

    ``None`` gates stand for the all-ones tensor (spatial attention only).
    """
    x_sa, y_sa = as_tensor(x_sa), as_tensor(y_sa)
    for t in (y_sa, fa_x, fa_y):
        if t is not None and as_tensor(t).shape != x_sa.shape:
            raise ValueError(f"combine: shape {as_tensor(t).shape} != {x_sa.shape}")
    x_out = x_sa if fa_x is None else mul(x_sa, fa_x)
    y_out = y_sa if fa_y is None else mul(y_sa, fa_y)
    return x_out, y_out


class SpatialAttention:
    def __init__(self, params: ParamSet, D: int, d_prime: int, scale_scores: bool = False,
                 rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.scale_scores = scale_scores
        self.w = params.add("sa.proj.w", glorot_uniform(rng, (d_prime, D), D, d_prime, dtype))
        self.b = params.add("sa.proj.b", np.zeros(d_prime, dtype))

    def __call__(self, X, Y):
        return sa_forward(X, Y, self.w, self.b, self.scale_scores)

    def project(self, X) -> Tensor:
        """The output projection alone, used when cross attention is disabled."""
        return conv1x1(X, self.w, self.b)


class FeatureAttention:
    def __init__(self, params: ParamSet, variant: str, D: int, d_prime: int,
                 reduction: int | None = None, prefix: str = "fa", rng=None, dtype=np.float32):
        if variant not in ("fa1", "fa2", "fa3"):
            raise ValueError(f"unknown feature attention variant {variant!r}")
        rng = rng or np.random.default_rng(0)
        self.variant = variant
        r = reduction or max(1, D // 4)
        if variant == "fa3":
            self.weights = (
                params.add(f"{prefix}.norm.gamma", np.ones(D, dtype)),
                params.add(f"{prefix}.norm.beta", np.zeros(D, dtype)),
                params.add(f"{prefix}.phi_h.w", glorot_uniform(rng, (d_prime, D), D, d_prime, dtype)),
                params.add(f"{prefix}.phi_h.b", np.zeros(d_prime, dtype)),
                params.add(f"{prefix}.phi_l.w", glorot_uniform(rng, (d_prime, D), D, d_prime, dtype)),
                params.add(f"{prefix}.phi_l.b", np.zeros(d_prime, dtype)),
            )
        else:
            d_in = D if variant == "fa1" else 2 * D
            self.weights = (
                params.add(f"{prefix}.w1", glorot_uniform(rng, (r, d_in), d_in, r, dtype)),
                params.add(f"{prefix}.b1", np.zeros(r, dtype)),
                params.add(f"{prefix}.w2", glorot_uniform(rng, (d_prime, r), r, d_prime, dtype)),
                params.add(f"{prefix}.b2", np.zeros(d_prime, dtype)),
            )

    def __call__(self, X) -> Tensor:
        fn = {"fa1": fa1_forward, "fa2": fa2_forward, "fa3": fa3_forward}[self.variant]
        return fn(X, *self.weights)


class InformationInteractor:
    """Spatial attention and/or feature attention, combined multiplicatively."""

    def __init__(self, params: ParamSet, D: int, d_prime: int, sa: bool = True, fa: str = "none",
                 scale_scores: bool = False, tied: bool = True, reduction: int | None = None,
                 rng=None, dtype=np.float32):
        if fa not in FA_VARIANTS:
            raise ValueError(f"fa must be one of {FA_VARIANTS}, got {fa!r}")
        rng = rng or np.random.default_rng(0)
        self.use_sa = sa
        self.spatial = SpatialAttention(params, D, d_prime, scale_scores, rng, dtype)
        self.fa_x = self.fa_y = None
        if fa != "none":
            self.fa_x = FeatureAttention(params, fa, D, d_prime, reduction, "fa", rng, dtype)
            self.fa_y = self.fa_x if tied else \
                FeatureAttention(params, fa, D, d_prime, reduction, "fa_y", rng, dtype)

    def __call__(self, X, Y, return_maps: bool = False):
        maps = None
        if self.use_sa:
            x_c, y_c, maps = self.spatial(X, Y)
        else:
            x_c, y_c = self.spatial.project(X), self.spatial.project(Y)
        gx = self.fa_x(X) if self.fa_x is not None else None
        gy = self.fa_y(Y) if self.fa_y is not None else None
        x_out, y_out = combine(x_c, y_c, gx, gy)
        return (x_out, y_out, maps) if return_maps else (x_out, y_out)
