"""Recurrent soft attention over the global feature slices.

Per proposal, an LSTM-driven loop produces a fresh K×K attention map at every
time step from the previous hidden state, takes the attention-weighted sum of
the K² global slices as the context vector x_t, and feeds [h; x_t; z] through
one shared affine transform T to advance the gates. The module output is the
final context vector x_T, projected to d_fc by two relu layers.

All ops take a batch of proposals at once: h, c, x, z are [B, ·] matrices and
the slices [K², D] are shared per image.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .instrumentation import counters


@dataclass
class GlobalAttentionParams:
    """Tape tensors for the recurrent attention path.

    ``t_affine`` is the (2D+d)×4d transform with gates sliced in (i, f, o, g)
    order. phi (d -> K²) and the two state initializers (D -> d) are
    one-hidden-layer tanh MLPs of width d. proj_* are the two relu layers that
    map x_T to F_G.
    """
    t_affine: Tensor
    t_bias: Tensor
    phi_w1: Tensor
    phi_b1: Tensor
    phi_w2: Tensor
    phi_b2: Tensor
    init_c_w1: Tensor
    init_c_b1: Tensor
    init_c_w2: Tensor
    init_c_b2: Tensor
    init_h_w1: Tensor
    init_h_b1: Tensor
    init_h_w2: Tensor
    init_h_b2: Tensor
    proj_w1: Tensor
    proj_b1: Tensor
    proj_w2: Tensor
    proj_b2: Tensor


@dataclass
class AttentionTrace:
    """Recorded per-step attention weights and context vectors (forward values)."""
    alphas: list        # T arrays of shape [B, K²]
    contexts: list      # T arrays of shape [B, D]
    final_context: np.ndarray  # [B, D]
    slices: np.ndarray | None = None  # [K², D] grid the contexts combine


def mlp_tanh(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """One-hidden-layer MLP with tanh hidden activation and linear output."""
    return ad.add(ad.matmul(ad.tanh(ad.add(ad.matmul(x, w1), b1)), w2), b2)


def init_state(global_slices: Tensor, params: GlobalAttentionParams) -> tuple[Tensor, Tensor]:
    """Mean slice m -> (c0, h0), each [1, d]."""
    n = global_slices.data.shape[0]
    if n < 1:
        raise ContractError("init_state: no slices")
    m = ad.reshape(ad.mean_axes(global_slices, (0,)), (1, global_slices.data.shape[1]))
    c0 = mlp_tanh(m, params.init_c_w1, params.init_c_b1, params.init_c_w2, params.init_c_b2)
    h0 = mlp_tanh(m, params.init_h_w1, params.init_h_b1, params.init_h_w2, params.init_h_b2)
    return c0, h0


def attention_map(h_prev: Tensor, params: GlobalAttentionParams) -> Tensor:
    """alpha = softmax(phi(h_prev)); conditioned only on the hidden state."""
    return ad.softmax(mlp_tanh(h_prev, params.phi_w1, params.phi_b1,
                               params.phi_w2, params.phi_b2))


def context_vector(alpha: Tensor, global_slices: Tensor) -> Tensor:
    """Convex combination of slices: x[b] = sum_i alpha[b,i] * slice_i."""
    return ad.matmul(alpha, global_slices)


def lstm_step(h_prev: Tensor, c_prev: Tensor, x: Tensor, z: Tensor,
              t_affine: Tensor, t_bias: Tensor) -> tuple[Tensor, Tensor]:
    """One shared-parameter recurrent step.

    Stacks [h_prev; x; z] (width 2D+d), applies the affine transform, slices
    the (i, f, o, g) gates, and advances c = f*c_prev + i*g, h = o*tanh(c).
    """
    d = h_prev.data.shape[-1]
    stacked = ad.concat([h_prev, x, z], axis=1)
    pre = ad.add(ad.matmul(stacked, t_affine), t_bias)
    i = ad.sigmoid(ad.slice_last(pre, 0, d))
    f = ad.sigmoid(ad.slice_last(pre, d, 2 * d))
    o = ad.sigmoid(ad.slice_last(pre, 2 * d, 3 * d))
    g = ad.tanh(ad.slice_last(pre, 3 * d, 4 * d))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    counters.global_attention_steps += 1
    return h, c


def run_global_context(global_slices: Tensor, z: Tensor, params: GlobalAttentionParams,
                       t_steps: int) -> tuple[Tensor, AttentionTrace]:
    """Unroll the attention loop for a [B, D] batch sharing one slice matrix.

    Returns the final context vector x_T (the module's raw output) and the
    per-step trace of attention maps and contexts.
    """
    if t_steps < 1:
        raise ContractError(f"t_steps must be >= 1, got {t_steps}")
    if z.data.ndim != 2:
        raise ContractError(f"z must be [B, D], got shape {z.data.shape}")
    b = z.data.shape[0]
    c0, h0 = init_state(global_slices, params)
    h = ad.broadcast_rows(h0, b)
    c = ad.broadcast_rows(c0, b)
    alphas, contexts = [], []
    x = None
    for _ in range(t_steps):
        alpha = attention_map(h, params)
        x = context_vector(alpha, global_slices)
        alphas.append(alpha.data)
        contexts.append(x.data)
        h, c = lstm_step(h, c, x, z, params.t_affine, params.t_bias)
    trace = AttentionTrace(alphas=alphas, contexts=contexts,
                           final_context=x.data, slices=global_slices.data)
    return x, trace


def project_global(f_g_raw: Tensor, params: GlobalAttentionParams) -> Tensor:
    """Two affine+relu layers mapping x_T to the final F_G (width d_fc)."""
    hidden = ad.relu(ad.add(ad.matmul(f_g_raw, params.proj_w1), params.proj_b1))
    return ad.relu(ad.add(ad.matmul(hidden, params.proj_w2), params.proj_b2))
