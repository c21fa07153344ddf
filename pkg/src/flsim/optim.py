"""First-order optimizers as pure functions over an explicit state object."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from flsim.errors import ConfigurationError, NumericalError


class OptimizerKind(str, enum.Enum):
    SGD = "sgd"
    MOMENTUM = "momentum"
    ADAM = "adam"


@dataclass(frozen=True)
class OptimizerState:
    kind: OptimizerKind
    lr: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", OptimizerKind(self.kind))
        if not self.lr >= 0.0:
            raise ConfigurationError(f"learning rate must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError("Adam betas must lie in [0, 1)")


def make_optimizer(kind: OptimizerKind | str, lr: float, **hyper) -> OptimizerState:
    return OptimizerState(kind=OptimizerKind(kind), lr=float(lr), **hyper)


def reset(state: OptimizerState) -> OptimizerState:
    """Drop moments and step count, keep hyperparameters."""
    return replace(state, step_count=0, first_moment=None, second_moment=None)


def update(state: OptimizerState, grad: np.ndarray) -> tuple[OptimizerState, np.ndarray]:
    """Advance the state and return the update ``delta`` such that params -= delta."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite value in gradient")
    for moment in (state.first_moment, state.second_moment):
        if moment is not None and moment.shape != grad.shape:
            raise ConfigurationError(
                f"optimizer moment shape {moment.shape} != gradient shape {grad.shape}")
    t = state.step_count + 1

    if state.kind is OptimizerKind.SGD:
        return replace(state, step_count=t), state.lr * grad

    if state.kind is OptimizerKind.MOMENTUM:
        v = grad.copy() if state.first_moment is None else state.momentum * state.first_moment + grad
        return replace(state, step_count=t, first_moment=v), state.lr * v

    m_prev = np.zeros_like(grad) if state.first_moment is None else state.first_moment
    v_prev = np.zeros_like(grad) if state.second_moment is None else state.second_moment
    m = state.beta1 * m_prev + (1.0 - state.beta1) * grad
    v = state.beta2 * v_prev + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    delta = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, step_count=t, first_moment=m, second_moment=v), delta


def step(state: OptimizerState, params: np.ndarray,
         grad: np.ndarray) -> tuple[OptimizerState, np.ndarray]:
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ConfigurationError(
            f"params shape {params.shape} != gradient shape {grad.shape}")
    new_state, delta = update(state, grad)
    return new_state, params - delta
