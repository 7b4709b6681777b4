"""Adam with the standard bias correction, state kept per parameter name."""

from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)  # name -> first moment
    v: dict = field(default_factory=dict)  # name -> second moment

    @classmethod
    def for_params(cls, named_params):
        st = cls()
        for name, p in named_params:
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        return st


def adam_step(named_params, state, lr):
    """One in-place update of every parameter from its .grad.

    Moments update as m <- b1 m + (1-b1) g and v <- b2 v + (1-b2) g^2, the
    step divides bias-corrected m by sqrt of bias-corrected v plus eps.
    Gradients are left untouched; the caller zeroes them when done.
    """
    state.t += 1
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    for name, p in named_params:
        g = p.grad
        if g is None:
            raise ValueError(f"{name}: no gradient to step with")
        if g.shape != p.data.shape:
            raise ValueError(f"{name}: grad shape {g.shape} "
                             f"!= param shape {p.data.shape}")
        m, v = state.m[name], state.v[name]
        m += (1.0 - BETA1) * (g - m)
        v += (1.0 - BETA2) * (g * g - v)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + EPS)).astype(p.data.dtype)
