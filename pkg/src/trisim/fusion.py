"""Feature fusion (receptive field module or pooling) and the classifier head."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import (ParamSet, Tensor, absolute, affine, amax, as_tensor, concat,
                     conv1x1, conv2d_dilated, glorot_uniform, mean, mul, relu, sigmoid,
                     softmax, sub)

LABEL_SETS = {
    "binary": ("match", "not_match"),
    "ternary": ("entailment", "neutral", "contradiction"),
}


def rfm_forward(x, branches: Sequence[tuple], shortcut: tuple) -> Tensor:
    """Multi-branch receptive field block.

    ``branches`` holds ``(psi_w, psi_b, phi_w, phi_b, dilation)`` per branch;
    each branch computes ``relu(phi^r(psi(x)))``.  The branch outputs and the
    1x1 shortcut ``shortcut = (w, b)`` are concatenated on the feature axis and
    squashed by a single sigmoid.
    """
    x = as_tensor(x)
    outs = []
    for psi_w, psi_b, phi_w, phi_b, r in branches:
        outs.append(relu(conv2d_dilated(conv2d_dilated(x, psi_w, psi_b, 1), phi_w, phi_b, r)))
    outs.append(conv1x1(x, *shortcut))
    return sigmoid(concat(outs, axis=-1))


def pooling_fusion(x, y) -> Tensor:
    """``[u_max; u_avg; v_max; v_avg; u_avg*v_avg; |u_avg - v_avg|]`` of length ``6 D'``."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"pooling_fusion: {x.shape} vs {y.shape}")
    u_max, u_avg = amax(x, (-3, -2)), mean(x, (-3, -2))
    v_max, v_avg = amax(y, (-3, -2)), mean(y, (-3, -2))
    return concat([u_max, u_avg, v_max, v_avg, mul(u_avg, v_avg), absolute(sub(u_avg, v_avg))], axis=-1)


def rfm_pair_vector(x_rfm, y_rfm) -> Tensor:
    """Global average pool of ``[X; Y; X*Y]`` over (h, l)."""
    x_rfm, y_rfm = as_tensor(x_rfm), as_tensor(y_rfm)
    if x_rfm.shape != y_rfm.shape:
        raise ValueError(f"head inputs differ: {x_rfm.shape} vs {y_rfm.shape}")
    return mean(concat([x_rfm, y_rfm, mul(x_rfm, y_rfm)], axis=-1), (-3, -2))


def head_logits(v, w1, b1, w2, b2) -> Tensor:
    return affine(relu(affine(v, w1, b1)), w2, b2)


def classify_head(x_rfm, y_rfm, w1, b1, w2, b2) -> Tensor:
    """Label probabilities for a fused pair."""
    return softmax(head_logits(rfm_pair_vector(x_rfm, y_rfm), w1, b1, w2, b2), axis=-1)


def _conv_init(rng, k: int, c_in: int, c_out: int, dtype) -> np.ndarray:
    return glorot_uniform(rng, (k, k, c_in, c_out), k * k * c_in, k * k * c_out, dtype)


class ReceptiveFieldModule:
    def __init__(self, params: ParamSet, d_in: int, d_out: int, psi_sizes: Sequence[int],
                 phi_size: int, dilations: Sequence[int], rng=None, dtype=np.float32):
        if len(psi_sizes) != len(dilations) or not psi_sizes:
            raise ValueError("need one psi size and one dilation per branch (k >= 1)")
        rng = rng or np.random.default_rng(0)
        self.k = len(psi_sizes)
        self.out_features = (self.k + 1) * d_out
        self.branches = []
        for i, (size, r) in enumerate(zip(psi_sizes, dilations), start=1):
            self.branches.append((
                params.add(f"rfm.branch{i}.psi.w", _conv_init(rng, size, d_in, d_out, dtype)),
                params.add(f"rfm.branch{i}.psi.b", np.zeros(d_out, dtype)),
                params.add(f"rfm.branch{i}.phi.w", _conv_init(rng, phi_size, d_out, d_out, dtype)),
                params.add(f"rfm.branch{i}.phi.b", np.zeros(d_out, dtype)),
                int(r),
            ))
        self.shortcut = (
            params.add("rfm.shortcut.w", glorot_uniform(rng, (d_out, d_in), d_in, d_out, dtype)),
            params.add("rfm.shortcut.b", np.zeros(d_out, dtype)),
        )

    def __call__(self, x) -> Tensor:
        return rfm_forward(x, self.branches, self.shortcut)


class ClassifierHead:
    def __init__(self, params: ParamSet, d_in: int, hidden: int, n_labels: int,
                 rng=None, dtype=np.float32, zero_init: bool = False):
        rng = rng or np.random.default_rng(0)

        def weight(shape, fan_in, fan_out):
            if zero_init:
                return np.zeros(shape, dtype)
            return glorot_uniform(rng, shape, fan_in, fan_out, dtype)

        self.d_in = d_in
        self.weights = (
            params.add("head.w1", weight((hidden, d_in), d_in, hidden)),
            params.add("head.b1", np.zeros(hidden, dtype)),
            params.add("head.w2", weight((n_labels, hidden), hidden, n_labels)),
            params.add("head.b2", np.zeros(n_labels, dtype)),
        )

    def logits(self, v) -> Tensor:
        v = as_tensor(v)
        if v.shape[-1] != self.d_in:
            raise ValueError(f"head expects {self.d_in} features, got {v.shape[-1]}")
        return head_logits(v, *self.weights)
