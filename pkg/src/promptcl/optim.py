"""Bias-corrected Adam over Tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def moment_arrays(self, names: dict[int, str]) -> dict[str, np.ndarray]:
        out = {}
        for key, (m, v) in self.moments.items():
            name = names.get(key, str(key))
            out[f"adam/{name}/m"] = m
            out[f"adam/{name}/v"] = v
        return out


def adam_step(state: AdamState, trainables: list[Tensor], lr: float) -> None:
    """One update of every trainable tensor; gradients are cleared afterwards."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in trainables:
        if not p.requires_grad:
            p.grad = None
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        key = id(p)
        if key not in state.moments:
            state.moments[key] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v * (1.0 / bc2))
        denom += state.eps
        np.divide(m, denom, out=denom)
        denom *= lr / bc1
        p.data -= denom
        p.grad = None
