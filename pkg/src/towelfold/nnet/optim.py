"""Adam with bias correction, operating in place on a dict of numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update. ``params`` and ``state`` are modified in place."""
    if set(grads) != set(params):
        raise ShapeError("gradient names do not match parameter names")
    if not state.m:
        fresh = AdamState.zeros_like(params)
        state.m, state.v = fresh.m, fresh.v
    state.step += 1
    t = state.step
    corr1 = 1.0 - beta1 ** t
    corr2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = (lr / corr1) * m / (np.sqrt(v / corr2) + eps)
        p -= step.astype(p.dtype, copy=False)
