"""Adaptive feature extraction: gated, position-normalised block stacking."""
from __future__ import annotations

import numpy as np

from .tensor import (ParamSet, Tensor, affine, as_tensor, div, glorot_uniform, mul,
                     relu, sigmoid, stack, sum_axes)


def default_reduction(D: int) -> int:
    return max(1, D // 4)


def afe_gates(block, w1, b1, w2, b2) -> Tensor:
    """Unnormalised per-position gates ``sigmoid(w2 relu(w1 x + b1) + b2)``, in (0, 1)."""
    return sigmoid(affine(relu(affine(block, w1, b1)), w2, b2))


def afe_normalize(gates) -> Tensor:
    """Divide each feature column by its sum over positions (axis -2)."""
    gates = as_tensor(gates)
    return div(gates, sum_axes(gates, -2, keepdims=True))


def afe_stack(blocks, gates) -> Tensor:
    """Weighted stacking ``X[h, i, d] = gate[h, i, d] * block[h, i, d]``.

    ``blocks`` and ``gates`` are either ``(..., H, L, D)`` tensors or
    sequences of per-block ``(..., L, D)`` tensors.
    """
    if isinstance(blocks, (list, tuple)):
        blocks = stack(blocks, axis=-3)
    if isinstance(gates, (list, tuple)):
        gates = stack(gates, axis=-3)
    blocks, gates = as_tensor(blocks), as_tensor(gates)
    if blocks.shape[-3:] != gates.shape[-3:]:
        raise ValueError(f"blocks {blocks.shape} vs gates {gates.shape}")
    return mul(gates, blocks)


class AdaptiveFeatureExtraction:
    """One gate network per block, shared by both sentences.

    With ``adaptive=False`` the gates are the constant ``1/L`` (plain
    averaging weights) and the module holds no parameters.
    """

    def __init__(self, params: ParamSet, n_blocks: int, D: int, reduction: int | None = None,
                 adaptive: bool = True, rng: np.random.Generator | None = None, dtype=np.float32):
        self.n_blocks, self.D, self.adaptive = n_blocks, D, adaptive
        self.reduction = reduction or default_reduction(D)
        self.weights = []
        if not adaptive:
            return
        rng = rng or np.random.default_rng(0)
        r = self.reduction
        for h in range(n_blocks):
            self.weights.append((
                params.add(f"afe.block{h}.w1", glorot_uniform(rng, (r, D), D, r, dtype)),
                params.add(f"afe.block{h}.b1", np.zeros(r, dtype)),
                params.add(f"afe.block{h}.w2", glorot_uniform(rng, (D, r), r, D, dtype)),
                params.add(f"afe.block{h}.b2", np.zeros(D, dtype)),
            ))

    def gates(self, blocks) -> Tensor:
        """Normalised gates for an ``(..., H, L, D)`` block stack."""
        blocks = as_tensor(blocks)
        if blocks.shape[-3] != self.n_blocks or blocks.shape[-1] != self.D:
            raise ValueError(f"expected (..., {self.n_blocks}, L, {self.D}), got {blocks.shape}")
        if not self.adaptive:
            L = blocks.shape[-2]
            return Tensor(np.full(blocks.shape, 1.0 / L, dtype=blocks.dtype))
        per_block = [afe_normalize(afe_gates(blocks[..., h, :, :], *self.weights[h]))
                     for h in range(self.n_blocks)]
        return stack(per_block, axis=-3)

    def __call__(self, blocks) -> Tensor:
        blocks = as_tensor(blocks)
        return afe_stack(blocks, self.gates(blocks))
