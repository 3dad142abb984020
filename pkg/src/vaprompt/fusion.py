"""Cross-modal attention, gated fusion and the VA regression head."""

from __future__ import annotations

import math
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .module import Linear, Module


class FusionMode(str, Enum):
    ATTENTION_ONLY = "attention_only"
    GATED_ONLY = "gated_only"
    HIERARCHICAL = "hierarchical"


class CrossModalAttention(Module):
    """Visual queries attend over audio keys/values, no output projection."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, T, D = x.shape
    return ad.transpose(ad.reshape(x, (B, T, heads, D // heads)), (0, 2, 1, 3))


def cross_modal_attention(
    h_v: Tensor, h_a: Tensor, params: CrossModalAttention, return_weights: bool = False
):
    """``softmax(Q K^T / sqrt(d_head)) V`` per head, heads concatenated.

    With ``return_weights`` also returns the ``(B, heads, T_v, T_a)`` weights.
    """
    if h_a.ndim < 2 or h_a.shape[-2] == 0:
        raise ValueError("cross_modal_attention: empty audio sequence")
    if h_v.shape[-2] == 0:
        raise ValueError("cross_modal_attention: empty visual sequence")
    squeeze = h_v.ndim == 2
    if squeeze:
        h_v = ad.reshape(h_v, (1,) + h_v.shape)
        h_a = ad.reshape(h_a, (1,) + h_a.shape)
    if h_v.shape[-1] != params.dim or h_a.shape[-1] != params.dim:
        raise ValueError(
            f"cross_modal_attention: dims {h_v.shape[-1]}, {h_a.shape[-1]} != {params.dim}"
        )
    B, T_v, D = h_v.shape
    heads = params.heads
    q = _split_heads(params.query(h_v), heads)
    k = _split_heads(params.key(h_a), heads)
    v = _split_heads(params.value(h_a), heads)
    scores = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(D // heads))
    weights = ad.softmax(scores)
    out = ad.reshape(ad.transpose(weights @ v, (0, 2, 1, 3)), (B, T_v, D))
    if squeeze:
        out = ad.reshape(out, (T_v, D))
    return (out, weights) if return_weights else out


class Gate(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.proj = Linear(2 * dim, dim, rng)


def gate_values(f_attn: Tensor, h_v: Tensor, params: Gate) -> Tensor:
    if f_attn.shape != h_v.shape:
        raise ValueError(f"gated_fusion: shape mismatch {f_attn.shape} vs {h_v.shape}")
    return ad.sigmoid(params.proj(ad.concat([f_attn, h_v], axis=-1)))


def gated_fusion(f_attn: Tensor, h_v: Tensor, params: Gate) -> Tensor:
    """Per-coordinate convex combination ``g * f_attn + (1 - g) * h_v``."""
    g = gate_values(f_attn, h_v, params)
    return g * f_attn + (1.0 - g) * h_v


class Fusion(Module):
    def __init__(self, dim: int, heads: int, mode: FusionMode | str, rng: np.random.Generator):
        self.mode = FusionMode(mode)
        self.attention = (
            CrossModalAttention(dim, heads, rng) if self.mode != FusionMode.GATED_ONLY else None
        )
        self.gate = Gate(dim, rng) if self.mode != FusionMode.ATTENTION_ONLY else None

    def __call__(self, h_v: Tensor, h_a: Tensor) -> Tensor:
        return fuse(h_v, h_a, self.mode, self)


def fuse(h_v: Tensor, h_a: Tensor, mode: FusionMode | str, params: Fusion) -> Tensor:
    mode = FusionMode(mode)
    if mode == FusionMode.ATTENTION_ONLY:
        return cross_modal_attention(h_v, h_a, params.attention)
    if mode == FusionMode.HIERARCHICAL:
        return gated_fusion(cross_modal_attention(h_v, h_a, params.attention), h_v, params.gate)
    if h_a.shape[-2] == 0:
        raise ValueError("fuse: empty audio sequence")
    # No attention step to align lengths: pool audio over time, repeat per frame.
    pooled = ad.mean(h_a, axis=-2, keepdims=True)
    aligned = pooled + Tensor(np.zeros(h_v.shape))
    return gated_fusion(aligned, h_v, params.gate)


class RegressionHead(Module):
    """``dim -> hidden (relu) -> 2 (tanh)``."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.hidden = Linear(dim, hidden, rng)
        self.out = Linear(hidden, 2, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return regress_va(x, self)


def regress_va(f_fused: Tensor, params: RegressionHead) -> Tensor:
    return ad.tanh(params.out(ad.relu(params.hidden(f_fused))))
