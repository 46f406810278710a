"""Plain SGD and bias-corrected Adam on ParameterVectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ParameterVector


def sgd_step(params: ParameterVector, grad: ParameterVector, lr: float) -> ParameterVector:
    params.check_same_layout(grad)
    return params.with_values(params.values - lr * grad.values)


@dataclass
class AdamState:
    m: ParameterVector
    v: ParameterVector
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ParameterVector) -> "AdamState":
        return cls(ParameterVector.zeros(params.layout), ParameterVector.zeros(params.layout), 0)


def adam_step(state: AdamState, params: ParameterVector, grad: ParameterVector,
              lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update. Returns ``(new_params, new_state)``; inputs are untouched."""
    params.check_same_layout(grad)
    params.check_same_layout(state.m)
    params.check_same_layout(state.v)
    t = state.t + 1
    g = grad.values
    m = beta1 * state.m.values + (1.0 - beta1) * g
    v = beta2 * state.v.values + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = params.values - lr * m_hat / (np.sqrt(v_hat) + eps)
    return (params.with_values(new),
            AdamState(params.with_values(m), params.with_values(v), t))
