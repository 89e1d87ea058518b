"""Adam optimizer over named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    skipped: int = 0  # batches dropped for non-finite gradients

    @staticmethod
    def for_params(params):
        st = AdamState()
        for name, t in params.items():
            data = t.data if hasattr(t, "data") else t
            st.m[name] = np.zeros_like(data)
            st.v[name] = np.zeros_like(data)
        return st


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8,
              grad_clip=None):
    """Apply one Adam update in place; skips the whole batch on non-finite grads.

    `params` maps names to autodiff Tensors (updated in place), `grads` maps
    the same names to numpy arrays.
    """
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            return state
    if grad_clip is not None:
        total = np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        if total > grad_clip:
            scale = np.float32(grad_clip / (total + 1e-12))
            grads = {k: g * scale for k, g in grads.items()}
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, tensor in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        tensor.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(np.float32)
    return state
