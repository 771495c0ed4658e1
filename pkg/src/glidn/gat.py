"""Single-head masked graph attention layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .autodiff import (
    DimensionError,
    Tensor,
    add,
    glorot_uniform,
    leaky_relu,
    linear_transform,
    masked_fill,
    masked_softmax,
    matmul,
    reshape,
    take,
)

INTER_LAYER_SLOPE = 0.2


@dataclass
class GatParams:
    """Shared node transform ``weight`` and attention vector ``attn`` of one layer."""

    weight: Tensor
    attn: Tensor
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.weight.data.ndim != 2:
            raise DimensionError(f"GAT weight must be 2-d, got {self.weight.shape}")
        if self.attn.shape != (2 * self.weight.shape[0],):
            raise DimensionError(
                f"attention vector shape {self.attn.shape} must be twice the output width "
                f"of weight {self.weight.shape}"
            )
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must be in [0, 1), got {self.leaky_slope}")

    @classmethod
    def init(cls, d_in: int, d_out: int, rng, leaky_slope: float = 0.2) -> "GatParams":
        weight = glorot_uniform((d_out, d_in), rng)
        attn = glorot_uniform((2 * d_out,), rng, fan_in=2 * d_out, fan_out=1)
        return cls(weight, attn, leaky_slope)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.attn]


@dataclass(frozen=True)
class AttentionMatrix:
    values: np.ndarray
    mask: np.ndarray


def _mask_bits(mask, n: int) -> np.ndarray:
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    if bits.shape[-2:] != (n, n):
        raise DimensionError(f"mask shape {bits.shape} does not match {n} nodes")
    if not np.all(np.diagonal(bits, axis1=-2, axis2=-1)):
        bits = bits.copy()
        idx = np.arange(n)
        bits[..., idx, idx] = True
    return bits


def _scores(Wh: Tensor, params: GatParams, bits: np.ndarray) -> Tensor:
    # a . [Wh_i ; Wh_j] == a_src . Wh_i + a_dst . Wh_j, so no N^2 concatenation
    d = params.d_out
    n = Wh.shape[-2]
    batch = Wh.shape[:-2]
    a_src = reshape(take(params.attn, slice(0, d)), (d, 1))
    a_dst = reshape(take(params.attn, slice(d, 2 * d)), (d, 1))
    src = matmul(Wh, a_src)
    dst = reshape(matmul(Wh, a_dst), batch + (1, n))
    return masked_fill(leaky_relu(add(src, dst), params.leaky_slope), bits)


def pairwise_scores(H: Tensor, params: GatParams, mask) -> Tensor:
    """LeakyReLU attention logits; masked-out pairs hold ``-inf``."""
    H = H if isinstance(H, Tensor) else Tensor(H)
    Wh = linear_transform(H, params.weight)
    return _scores(Wh, params, _mask_bits(mask, H.shape[-2]))


def attention(H: Tensor, params: GatParams, mask) -> AttentionMatrix:
    H = H if isinstance(H, Tensor) else Tensor(H)
    bits = _mask_bits(mask, H.shape[-2])
    alpha = masked_softmax(pairwise_scores(H, params, bits), bits)
    return AttentionMatrix(alpha.data.copy(), bits)


def gat_layer(H: Tensor, params: GatParams, mask) -> Tensor:
    """One attention update: ``out[i] = sum_j alpha[i, j] * W h_j``.

    The diagonal of ``mask`` is forced true so every node attends to itself.
    """
    H = H if isinstance(H, Tensor) else Tensor(H)
    if H.shape[-1] != params.d_in:
        raise DimensionError(f"gat_layer: node width {H.shape[-1]} vs weight shape {params.weight.shape}")
    bits = _mask_bits(mask, H.shape[-2])
    Wh = linear_transform(H, params.weight)
    alpha = masked_softmax(_scores(Wh, params, bits), bits)
    return matmul(alpha, Wh)


def gat_stack(H: Tensor, layers: Sequence[GatParams], mask) -> Tensor:
    """Apply ``layers`` in order over one mask, LeakyReLU between layers."""
    H = H if isinstance(H, Tensor) else Tensor(H)
    for prev, nxt in zip(layers, layers[1:]):
        if prev.d_out != nxt.d_in:
            raise DimensionError(f"layer widths do not chain: {prev.d_out} -> {nxt.d_in}")
    if not layers:
        return H
    bits = _mask_bits(mask, H.shape[-2])
    for k, params in enumerate(layers):
        H = gat_layer(H, params, bits)
        if k < len(layers) - 1:
            H = leaky_relu(H, INTER_LAYER_SLOPE)
    return H
