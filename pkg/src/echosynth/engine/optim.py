"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0:
            raise ValueError(f"Adam epsilon must be positive, got {self.epsilon}")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> None:
    """Apply one Adam update in place to ``params``; increments ``state.step``.

    Every parameter's gradient is checked before anything is modified, so a
    non-finite gradient leaves parameters and state untouched.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    c1 = np.float32(1.0 - state.beta1 ** t)
    c2 = np.float32(1.0 - state.beta2 ** t)
    lr32, eps = np.float32(lr), np.float32(state.epsilon)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= lr32 * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    """Optimizer over a module's named parameters."""

    def __init__(self, named_params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params: dict[str, Tensor] = dict(named_params)
        self.lr = lr
        self.state = AdamState(beta1=betas[0], beta2=betas[1], epsilon=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        adam_step({n: p.data for n, p in self.params.items()},
                  {n: p.grad for n, p in self.params.items() if p.grad is not None},
                  self.state, self.lr if lr is None else lr)
