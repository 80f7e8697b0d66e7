"""
Adam optimizer over a ParamSet
"""

from dataclasses import dataclass, field
from typing import List

import numpy as np

from engine.python.errors import ContractError
from engine.python.params import ParamSet

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


@dataclass
class AdamState:
    """Per-parameter first/second moment buffers plus the step counter"""
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: ParamSet) -> "AdamState":
        return cls(
            m=[np.zeros_like(a) for a in params.arrays()],
            v=[np.zeros_like(a) for a in params.arrays()],
        )


def adam_step(params: ParamSet, state: AdamState, lr: float) -> None:
    """
    Apply one bias-corrected Adam update to every tensor in place

    Args:
        params: Parameters whose `grad` fields are populated
        state: Moment buffers created by AdamState.for_params
        lr: Learning rate
    """
    tensors = params.tensors()
    if len(state.m) != len(tensors):
        raise ContractError("Adam state does not match the parameter set")
    missing = [t.name for t in tensors if t.grad is None]
    if missing:
        raise ContractError(f"Adam step without gradients for: {', '.join(missing)}")

    state.step += 1
    correction1 = 1.0 - BETA1 ** state.step
    correction2 = 1.0 - BETA2 ** state.step
    for tensor, m, v in zip(tensors, state.m, state.v):
        g = tensor.grad
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + EPSILON)


class Adam:
    """Stateful wrapper binding a ParamSet, its moment buffers and a learning rate"""

    def __init__(self, params: ParamSet, lr: float = 0.005):
        self.params = params
        self.lr = lr
        self.state = AdamState.for_params(params)

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr)

    def zero_grad(self) -> None:
        for tensor in self.params.tensors():
            tensor.zero_grad()
