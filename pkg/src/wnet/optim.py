"""Adam optimiser with bias-corrected moment estimates."""

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


@dataclass
class AdamState:
    """Moment buffers and step counter for a single parameter tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, param, **hyper):
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param, grad, state):
    """Apply one Adam update to ``param`` in place and advance ``state``.

    m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2
    param <- param - lr * m_hat / (sqrt(v_hat) + eps)
    """
    if param.shape != grad.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise ShapeError(f"adam shape mismatch: param {param.shape}, grad {grad.shape}, moments {state.m.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    m, v = state.m, state.v
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * np.square(grad)
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    denom = np.sqrt(v / c2)
    denom += state.epsilon
    param -= (state.learning_rate / c1) * m / denom
    return param, state


class Adam:
    """Adam over a dict of named parameters, one ``AdamState`` per name."""

    def __init__(self, params, learning_rate=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.hyper = dict(learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon)
        self.states = {name: AdamState.zeros_like(p, **self.hyper) for name, p in params.items()}

    @classmethod
    def from_states(cls, states, **hyper):
        opt = cls({}, **hyper)
        opt.states = dict(states)
        return opt

    def step(self, params, grads):
        for name, p in params.items():
            adam_step(p, grads[name], self.states[name])
