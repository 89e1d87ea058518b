"""Denoiser and critic MLPs plus the diffusion-step embedding.

Parameters live in plain dicts of autodiff Tensors so the optimizer and
checkpoint code can treat every network uniformly.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concat, no_grad

STEP_EMBED_DIM = 16
HIDDEN = 256


def sinusoidal_embed(k, dim=STEP_EMBED_DIM):
    """Interleaved sin/cos embedding of a diffusion step index.

    Frequencies are geometrically spaced with base 10000, so dim=2 gives
    (sin k, cos k). Accepts a scalar or an integer array; returns shape
    (dim,) or (len(k), dim) float32.
    """
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    k = np.asarray(k, dtype=np.float64)
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    ang = k[..., None] * freqs
    out = np.empty(k.shape + (dim,), dtype=np.float32)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def _init_linear(rng, fan_in, fan_out):
    # uniform scaled by 1/sqrt(fan_in)
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
    b = rng.uniform(-bound, bound, size=(fan_out,)).astype(np.float32)
    return Tensor.param(w), Tensor.param(b)


def init_denoiser(rng, cond_dim, h_a, action_dim, hidden=HIDDEN):
    """Denoiser parameter dict: step-embed projection + 3 linear layers."""
    chunk_dim = h_a * action_dim
    in_dim = chunk_dim + STEP_EMBED_DIM + cond_dim
    params = {}
    params["step.w"], params["step.b"] = _init_linear(rng, STEP_EMBED_DIM, STEP_EMBED_DIM)
    params["lin0.w"], params["lin0.b"] = _init_linear(rng, in_dim, hidden)
    params["lin1.w"], params["lin1.b"] = _init_linear(rng, hidden, hidden)
    params["out.w"], params["out.b"] = _init_linear(rng, hidden, chunk_dim)
    return params


def denoiser_forward(params, noisy_chunk, k, condition):
    """Predict the injected noise for a batch of noisy action chunks.

    noisy_chunk: (B, h_a, action_dim) or (h_a, action_dim)
    k: int or (B,) int array of diffusion step indices
    condition: (B, cond_dim) or (cond_dim,)
    Returns a Tensor with the same chunk shape as the input.
    """
    chunk = np.asarray(noisy_chunk.data if isinstance(noisy_chunk, Tensor) else noisy_chunk,
                       dtype=np.float32)
    cond = np.asarray(condition, dtype=np.float32)
    single = chunk.ndim == 2
    if single:
        chunk = chunk[None]
        cond = cond[None]
    B, h_a, action_dim = chunk.shape
    if cond.shape[0] != B:
        raise ValueError(f"condition batch {cond.shape[0]} != chunk batch {B}")
    expect_in = params["lin0.w"].shape[0]
    got_in = h_a * action_dim + STEP_EMBED_DIM + cond.shape[1]
    if got_in != expect_in:
        raise ValueError(
            f"denoiser input dim mismatch: chunk {h_a}x{action_dim} + embed "
            f"{STEP_EMBED_DIM} + cond {cond.shape[1]} = {got_in}, expected {expect_in}")

    ks = np.broadcast_to(np.asarray(k), (B,))
    emb = sinusoidal_embed(ks)                      # (B, 16)
    e = (Tensor(emb) @ params["step.w"] + params["step.b"]).tanh()
    flat = noisy_chunk.reshape(B, h_a * action_dim) if isinstance(noisy_chunk, Tensor) \
        else Tensor(chunk.reshape(B, -1))
    x = concat([flat, e, Tensor(cond)], axis=1)
    h = (x @ params["lin0.w"] + params["lin0.b"]).relu()
    h = (h @ params["lin1.w"] + params["lin1.b"]).relu()
    out = h @ params["out.w"] + params["out.b"]
    out = out.reshape(B, h_a, action_dim)
    if single:
        out = out.reshape(h_a, action_dim)
    return out


def denoiser_forward_np(params_np, chunk, k, cond):
    """Graph-free forward on raw numpy params; used on hot inference paths."""
    B = chunk.shape[0]
    emb = sinusoidal_embed(np.broadcast_to(np.asarray(k), (B,)))
    e = np.tanh(emb @ params_np["step.w"] + params_np["step.b"])
    x = np.concatenate([chunk.reshape(B, -1), e, cond], axis=1)
    h = np.maximum(x @ params_np["lin0.w"] + params_np["lin0.b"], 0.0)
    h = np.maximum(h @ params_np["lin1.w"] + params_np["lin1.b"], 0.0)
    out = h @ params_np["out.w"] + params_np["out.b"]
    return out.reshape(chunk.shape)


def init_critic(rng, cond_dim, hidden=HIDDEN):
    params = {}
    params["lin0.w"], params["lin0.b"] = _init_linear(rng, cond_dim, hidden)
    params["lin1.w"], params["lin1.b"] = _init_linear(rng, hidden, hidden)
    params["out.w"], params["out.b"] = _init_linear(rng, hidden, 1)
    return params


def critic_forward(params, cond):
    """Scalar value head over conditions; returns Tensor of shape (B,)."""
    cond = np.asarray(cond, dtype=np.float32)
    if cond.ndim == 1:
        cond = cond[None]
    h = (Tensor(cond) @ params["lin0.w"] + params["lin0.b"]).relu()
    h = (h @ params["lin1.w"] + params["lin1.b"]).relu()
    out = h @ params["out.w"] + params["out.b"]
    return out.reshape(cond.shape[0])


def mlp_init(rng, dims):
    """Generic MLP parameter dict for `dims` like [384, 64, 4]."""
    params = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"lin{i}.w"], params[f"lin{i}.b"] = _init_linear(rng, a, b)
    return params


def mlp_forward(params, x, activation="relu"):
    """Forward through a mlp_init()-style dict; activation on all but last layer."""
    x = Tensor(np.asarray(x, dtype=np.float32)) if not isinstance(x, Tensor) else x
    n = len(params) // 2
    for i in range(n):
        x = x @ params[f"lin{i}.w"] + params[f"lin{i}.b"]
        if i < n - 1:
            x = x.relu() if activation == "relu" else x.tanh()
    return x


def params_to_numpy(params):
    return {name: t.data.copy() for name, t in params.items()}


def params_from_numpy(arrays):
    return {name: Tensor.param(a) for name, a in arrays.items()}


def zero_grads(params):
    for t in params.values():
        t.grad = None


def collect_grads(params):
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in params.items()}
