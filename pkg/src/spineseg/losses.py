"""Training objective: binary cross entropy plus soft Dice, one weighted
term per stage.

Both losses are implemented as single tape primitives with hand-derived
gradients (cheaper than composing them from log/divide ops, and they double
as non-trivial cases for the finite-difference checker).
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T

CLAMP = 1e-7


@dataclass
class LossWeights:
    lambda_c: float = 0.4
    lambda_f: float = 0.6

    def validate(self):
        if self.lambda_c < 0 or self.lambda_f < 0:
            raise ValueError(f"loss weights must be >= 0, got {self}")
        return self


def _check_dims(p, m):
    if p.shape != m.shape:
        raise ValueError(f"prediction {p.shape} vs target {m.shape}")


def bce_loss(pred, target):
    """Mean over all pixels of -[m log p + (1-m) log(1-p)], with p clamped
    to [1e-7, 1-1e-7] before the logs."""
    p, m = pred.data, target.data
    _check_dims(p, m)
    lo = np.asarray(CLAMP, p.dtype)
    hi = np.asarray(1.0, p.dtype) - lo
    pc = np.clip(p, lo, hi)
    n = p.size
    val = -(m * np.log(pc) + (1.0 - m) * np.log(1.0 - pc)).mean(dtype=p.dtype)

    def bwd(g):
        inside = ((p >= lo) & (p <= hi)).astype(p.dtype)
        gp = (-m / pc + (1.0 - m) / (1.0 - pc)) * (inside / n)
        return g.reshape(()) * gp, None

    return T.custom_op(np.asarray(val).reshape(1), (pred, target), bwd)


def dice_loss(pred, target, eps=1e-6):
    """Soft Dice with squared-denominator form:
    1 - (2*sum(p*m) + eps) / (sum(p^2) + sum(m^2) + eps)."""
    p, m = pred.data, target.data
    _check_dims(p, m)
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    a = 2.0 * float((p * m).sum()) + eps
    b = float((p * p).sum()) + float((m * m).sum()) + eps
    val = np.asarray(1.0 - a / b, p.dtype)

    def bwd(g):
        gp = (2.0 / (b * b)) * (a * p - b * m)
        return g.reshape(()) * gp.astype(p.dtype), None

    return T.custom_op(val.reshape(1), (pred, target), bwd)


def total_loss(p_coarse, p_fine, target, weights=None, eps=1e-6):
    """lambda_c * (BCE + Dice)(coarse) + lambda_f * (BCE + Dice)(fine).
    A zero weight skips its stage entirely (that stage's map then gets no
    direct gradient)."""
    w = (weights or LossWeights()).validate()
    terms = []
    if w.lambda_c != 0.0:
        terms.append(T.scale(T.add(bce_loss(p_coarse, target),
                                   dice_loss(p_coarse, target, eps)), w.lambda_c))
    if w.lambda_f != 0.0:
        terms.append(T.scale(T.add(bce_loss(p_fine, target),
                                   dice_loss(p_fine, target, eps)), w.lambda_f))
    if not terms:
        raise ValueError("both loss weights are zero")
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total
