"""Modality projections and temporal encoders (bidirectional GRU, TCN).

Encoders accept ``(T, D)`` or batched ``(B, T, D)`` input and return the same
leading shape with ``out_dim`` channels.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .module import Linear, Module, uniform_param


def project(features: Tensor, params: Linear) -> Tensor:
    """Per-frame affine map into the common space."""
    if features.shape[-1] != params.d_in:
        raise ValueError(
            f"project: feature dim {features.shape[-1]} does not match projection {params.d_in}"
        )
    return params(features)


def _batched(seq: Tensor) -> tuple[Tensor, bool]:
    if seq.ndim == 2:
        return ad.reshape(seq, (1,) + seq.shape), True
    if seq.ndim != 3:
        raise ValueError(f"expected (T, D) or (B, T, D) input, got shape {seq.shape}")
    return seq, False


class GRUDirection(Module):
    """One direction of a single-layer GRU.

    Gate order in the packed weights is (update, reset, candidate); the reset
    gate multiplies the previous state before the recurrent matmul.
    """

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.d_in, self.hidden = d_in, hidden
        self.w_input = uniform_param(rng, (d_in, 3 * hidden), d_in)
        self.w_gates = uniform_param(rng, (hidden, 2 * hidden), hidden)
        self.w_cand = uniform_param(rng, (hidden, hidden), hidden)
        self.bias = uniform_param(rng, (3 * hidden,), hidden)

    def run(self, x: Tensor, reverse: bool = False) -> list[Tensor]:
        """Hidden states ``h_t`` for each time step, returned in time order."""
        B, T, _ = x.shape
        H = self.hidden
        xw = x @ self.w_input + self.bias
        x_zr = ad.slice(xw, 0, 2 * H)
        x_n = ad.slice(xw, 2 * H, 3 * H)
        h = Tensor(np.zeros((B, H)))
        states: list[Tensor | None] = [None] * T
        order = range(T - 1, -1, -1) if reverse else range(T)
        for t in order:
            zr = ad.sigmoid(ad.select(x_zr, t, axis=1) + h @ self.w_gates)
            z = ad.slice(zr, 0, H)
            r = ad.slice(zr, H, 2 * H)
            n = ad.tanh(ad.select(x_n, t, axis=1) + (r * h) @ self.w_cand)
            h = n + z * (h - n)
            states[t] = h
        return states


class BiGRU(Module):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.fwd = GRUDirection(d_in, hidden, rng)
        self.bwd = GRUDirection(d_in, hidden, rng)
        self.out_dim = 2 * hidden

    def __call__(self, seq: Tensor) -> Tensor:
        return bigru_forward(seq, self)


def bigru_forward(seq: Tensor, params: BiGRU) -> Tensor:
    """Concatenated forward and backward hidden states, ``(..., T, 2H)``."""
    x, squeeze = _batched(seq)
    if x.shape[1] == 0:
        raise ValueError("bigru_forward: empty sequence")
    if x.shape[2] != params.fwd.d_in:
        raise ValueError(f"bigru_forward: input dim {x.shape[2]} != {params.fwd.d_in}")
    fwd = ad.stack(params.fwd.run(x), axis=1)
    bwd = ad.stack(params.bwd.run(x, reverse=True), axis=1)
    out = ad.concat([fwd, bwd], axis=-1)
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return out


class TemporalBlock(Module):
    """Two causal dilated convolutions with relu, added to a residual path."""

    def __init__(
        self, c_in: int, c_out: int, kernel: int, dilation: int, rng: np.random.Generator
    ):
        self.kernel, self.dilation = kernel, dilation
        self.conv1_w = uniform_param(rng, (kernel, c_in, c_out), kernel * c_in)
        self.conv1_b = uniform_param(rng, (c_out,), kernel * c_in)
        self.conv2_w = uniform_param(rng, (kernel, c_out, c_out), kernel * c_out)
        self.conv2_b = uniform_param(rng, (c_out,), kernel * c_out)
        self.residual = Linear(c_in, c_out, rng) if c_in != c_out else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.relu(ad.causal_conv1d(x, self.conv1_w, self.conv1_b, self.dilation))
        y = ad.relu(ad.causal_conv1d(y, self.conv2_w, self.conv2_b, self.dilation))
        res = x if self.residual is None else self.residual(x)
        return res + y


class TCN(Module):
    def __init__(
        self,
        d_in: int,
        channels: int,
        rng: np.random.Generator,
        kernel: int = 3,
        dilations: Sequence[int] = (1, 2, 4, 8),
    ):
        self.kernel = kernel
        self.dilations = tuple(dilations)
        self.blocks = []
        c = d_in
        for d in self.dilations:
            self.blocks.append(TemporalBlock(c, channels, kernel, d, rng))
            c = channels
        self.out_dim = channels

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.kernel, self.dilations)

    def __call__(self, seq: Tensor) -> Tensor:
        return tcn_forward(seq, self)


def receptive_field(kernel: int, dilations: Sequence[int]) -> int:
    """Frames seen by the last output: each block has two convs of span (k-1)d."""
    return 1 + sum(2 * (kernel - 1) * d for d in dilations)


def tcn_forward(seq: Tensor, params: TCN) -> Tensor:
    x, squeeze = _batched(seq)
    if x.shape[1] == 0:
        raise ValueError("tcn_forward: empty sequence")
    for block in params.blocks:
        x = block(x)
    if squeeze:
        x = ad.reshape(x, x.shape[1:])
    return x


def make_encoder(kind: str, d_in: int, out_dim: int, rng: np.random.Generator, **tcn_kwargs):
    """``gru`` splits ``out_dim`` across two directions; ``tcn`` keeps it whole."""
    if kind == "gru":
        if out_dim % 2:
            raise ValueError(f"bidirectional GRU needs an even output dim, got {out_dim}")
        return BiGRU(d_in, out_dim // 2, rng)
    if kind == "tcn":
        return TCN(d_in, out_dim, rng, **tcn_kwargs)
    raise ValueError(f"unknown temporal encoder {kind!r}")
