"""SGD and Adam over flat parameter vectors, plus the step-decay schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: np.ndarray | None = field(default=None, repr=False)
    second_moment: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    @classmethod
    def sgd(cls, learning_rate: float, weight_decay: float = 0.0) -> OptimizerState:
        return cls("sgd", learning_rate, weight_decay)

    @classmethod
    def adam(cls, n_params: int, learning_rate: float, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        return cls(
            "adam",
            learning_rate,
            weight_decay,
            beta1,
            beta2,
            eps,
            first_moment=np.zeros(n_params),
            second_moment=np.zeros(n_params),
        )


def _check(params: np.ndarray, grads: np.ndarray) -> None:
    if params.shape != grads.shape:
        raise ValueError(f"params/grads length mismatch: {params.shape} vs {grads.shape}")


def sgd_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray, lr: float | None = None) -> np.ndarray:
    """In-place ``params -= lr * (grads + weight_decay * params)``; returns ``params``."""
    _check(params, grads)
    lr = state.learning_rate if lr is None else lr
    if state.weight_decay:
        params -= lr * (grads + state.weight_decay * params)
    else:
        params -= lr * grads
    state.step_count += 1
    return params


def adam_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray, lr: float | None = None) -> np.ndarray:
    """Bias-corrected Adam update, in place; returns ``params``."""
    _check(params, grads)
    if state.first_moment is None or state.first_moment.shape != params.shape:
        raise ValueError("adam moment buffers do not match params")
    lr = state.learning_rate if lr is None else lr
    if state.weight_decay:
        grads = grads + state.weight_decay * params
    state.step_count += 1
    t = state.step_count
    m, v = state.first_moment, state.second_moment
    m *= state.beta1
    m += (1 - state.beta1) * grads
    v *= state.beta2
    v += (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def optimizer_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray, lr: float | None = None) -> np.ndarray:
    if state.kind == "adam":
        return adam_step(state, params, grads, lr)
    return sgd_step(state, params, grads, lr)


def lr_schedule(base_lr: float, step: int, total_steps: int, factor: float = 0.3) -> float:
    """Step decay: multiply by ``factor`` at half and again at three quarters of ``total_steps``."""
    if step * 4 >= total_steps * 3:
        return base_lr * factor * factor
    if step * 2 >= total_steps:
        return base_lr * factor
    return base_lr
