"""Adam with per-coordinate learning rates."""
from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self):
        return AdamState(self.m.copy(), self.v.copy(), self.t)


def adam_step(params, state, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update.

    ``lr`` is a scalar or an array matching ``params`` (one rate per
    coordinate, which is how parameter groups are expressed).  Returns
    ``(new_params, new_state)``; the inputs are not modified.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    step = np.asarray(lr, dtype=np.float64) * m_hat / (np.sqrt(v_hat) + eps)
    return params - step, AdamState(m, v, t)
