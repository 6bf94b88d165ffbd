"""ADAM optimizer with stepped learning-rate decay.

The schedule multiplies the learning rate by the decay factor after every
`decay_every` completed steps, so the rate in effect after k*decay_every
steps is initial * decay**k.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError


@dataclass
class AdamState:
    first_moment: dict
    second_moment: dict
    step: int = 0
    lr_initial: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.9
    decay_every: int = 1000

    @property
    def learning_rate(self) -> float:
        return self.lr_initial * self.decay ** (self.step // self.decay_every)


def init_adam(params: dict, lr: float = 0.01, beta1: float = 0.9,
              beta2: float = 0.999, decay: float = 0.9,
              decay_every: int = 1000) -> AdamState:
    return AdamState(
        first_moment={k: np.zeros_like(v) for k, v in params.items()},
        second_moment={k: np.zeros_like(v) for k, v in params.items()},
        lr_initial=lr,
        beta1=beta1,
        beta2=beta2,
        decay=decay,
        decay_every=decay_every,
    )


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected ADAM update. Mutates state, returns new params.

    The update uses the learning rate in effect before the step counter
    advances; decay therefore kicks in on the step after each multiple of
    decay_every, matching a rate of initial * decay**k after k multiples.
    """
    if set(params) != set(grads):
        raise ValidationError(
            f"adam_step: params/grads keys differ: "
            f"{sorted(set(params) ^ set(grads))}"
        )
    lr = state.learning_rate
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    new_params = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValidationError(
                f"adam_step: gradient shape {g.shape} != parameter shape "
                f"{p.shape} for {name}"
            )
        m = state.first_moment[name]
        v = state.second_moment[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / corr1
        v_hat = v / corr2
        new_params[name] = p - (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return new_params
