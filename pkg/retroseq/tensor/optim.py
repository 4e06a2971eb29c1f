"""The Adam optimizer used to train every retroseq model."""
from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from retroseq.tensor.engine import ShapeError, Tensor

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Moment buffers and hyperparameters of the Adam optimizer.

    Attributes:
        learning_rate: The step size.
        beta1: Decay rate of the first moment.
        beta2: Decay rate of the second moment.
        eps: Added to the denominator for numerical stability.
        step: Number of updates applied so far.
        first_moments: The first moment of each parameter, keyed by name.
        second_moments: The second moment of each parameter, keyed by name.
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moments: dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
) -> OptimizerState:
    """Applies one bias-corrected Adam step.

    The parameter values are updated in place.

    Args:
        params: The parameters, keyed by name.
        grads: The gradient of each parameter. Parameters without an entry
            are treated as having a zero gradient.
        state: The optimizer state. Moment buffers are created on first use.

    Returns:
        The updated optimizer state (the same object as ``state``).
    """
    for name, param in params.items():
        g = grads.get(name)
        if g is not None and np.shape(g) != param.shape:
            raise ShapeError(
                f"gradient of {name} has shape {np.shape(g)}, expected {param.shape}"
            )
        for buffers in (state.first_moments, state.second_moments):
            if name in buffers and buffers[name].shape != param.shape:
                raise ShapeError(
                    f"optimizer moment of {name} has shape {buffers[name].shape}, "
                    f"expected {param.shape}"
                )

    state.step += 1
    correction1 = 1 - state.beta1**state.step
    correction2 = 1 - state.beta2**state.step

    for name, param in params.items():
        g = grads.get(name)
        g = np.zeros_like(param.data) if g is None else np.asarray(g, dtype=param.dtype)
        m = state.first_moments.get(name)
        v = state.second_moments.get(name)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.first_moments[name] = m
        state.second_moments[name] = v

        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            param.dtype
        )

    logger.debug("adam step %d over %d parameters", state.step, len(params))
    return state


class Adam:
    """Adam optimizer bound to a set of named parameters.

    Args:
        params: The parameters to optimize, keyed by name.
        learning_rate: The step size.
        beta1: Decay rate of the first moment.
        beta2: Decay rate of the second moment.
        eps: Numerical stability constant.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.state = OptimizerState(
            learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps
        )

    def step(self, grads: Mapping[str, np.ndarray]):
        adam_update(self.params, grads, self.state)
